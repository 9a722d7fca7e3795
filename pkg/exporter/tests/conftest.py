"""Shared fixtures: a tiny offline dual-encoder checkpoint and an image tree.

The checkpoint is built from scratch (seeded random weights, byte-level
tokenizer vocabulary) so the suite runs without network access. It is a
real CLIPModel, just a very small one: 16-dim projections, two layers
per tower, 32x32 inputs.
"""

import numpy as np
import pytest

_ACCEPTANCE_LINES = {}

LOGIT_SCALE = 2.6593  # temperature = 1 / exp(2.6593) ~ 0.07


def _build_vocab() -> dict:
    from tokenizers import pre_tokenizers

    # byte-level symbols in plain and word-final form cover any input text
    alphabet = sorted(pre_tokenizers.ByteLevel.alphabet())
    vocab = {}
    for sym in alphabet:
        vocab[sym] = len(vocab)
    for sym in alphabet:
        vocab[sym + "</w>"] = len(vocab)
    vocab["<|startoftext|>"] = len(vocab)
    vocab["<|endoftext|>"] = len(vocab)  # largest id, where pooling looks
    return vocab


def _build_checkpoint(target: str) -> None:
    import torch
    from transformers import (
        CLIPConfig,
        CLIPImageProcessor,
        CLIPModel,
        CLIPProcessor,
        CLIPTokenizer,
    )

    vocab = _build_vocab()
    tokenizer = CLIPTokenizer(vocab=vocab, merges=[])
    config = CLIPConfig(
        text_config=dict(
            vocab_size=len(vocab),
            hidden_size=32,
            intermediate_size=64,
            num_hidden_layers=2,
            num_attention_heads=4,
            max_position_embeddings=77,
            bos_token_id=vocab["<|startoftext|>"],
            eos_token_id=vocab["<|endoftext|>"],
        ),
        vision_config=dict(
            hidden_size=32,
            intermediate_size=64,
            num_hidden_layers=2,
            num_attention_heads=4,
            image_size=32,
            patch_size=8,
            num_channels=3,
        ),
        projection_dim=16,
        logit_scale_init_value=LOGIT_SCALE,
    )
    torch.manual_seed(0)
    model = CLIPModel(config)
    model.eval()
    model.save_pretrained(target)
    image_processor = CLIPImageProcessor(
        size={"shortest_edge": 32}, crop_size={"height": 32, "width": 32}
    )
    CLIPProcessor(image_processor=image_processor, tokenizer=tokenizer).save_pretrained(target)


@pytest.fixture(scope="session")
def checkpoint_dir(tmp_path_factory) -> str:
    target = tmp_path_factory.mktemp("checkpoint")
    _build_checkpoint(str(target))
    return str(target)


@pytest.fixture(scope="session")
def image_root(tmp_path_factory) -> str:
    """Two classes of seeded PNGs plus one unreadable file under cat/."""
    from PIL import Image

    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(7)
    counts = {"cat": 5, "dog": 6}
    for name, count in counts.items():
        directory = root / name
        directory.mkdir()
        for i in range(count):
            pixels = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
            Image.fromarray(pixels).save(directory / f"img_{i:02d}.png")
    (root / "cat" / "broken.png").write_bytes(b"not a png at all")
    return str(root)


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one PASS/FAIL line per acceptance check for the run summary."""

    def log(number: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE_LINES[number] = (passed, detail)

    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria (exporter)")
    for number in sorted(_ACCEPTANCE_LINES):
        passed, detail = _ACCEPTANCE_LINES[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.line(f"criterion {number:>2} {status}: {detail}")
