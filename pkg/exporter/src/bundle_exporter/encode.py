"""Checkpoint loading and batched image/prompt encoding."""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .fcb import write_fcb
from .manifest import ExportManifest

log = logging.getLogger("bundle_exporter")

DEFAULT_TEMPERATURE = 0.01


class ExportError(Exception):
    """A fatal export failure: bad checkpoint, unusable images, or I/O."""


def load_checkpoint(identifier: str):
    """Load a dual-encoder checkpoint and its preprocessing pipeline."""
    try:
        from transformers import CLIPModel, CLIPProcessor

        model = CLIPModel.from_pretrained(identifier)
        processor = CLIPProcessor.from_pretrained(identifier)
    except Exception as exc:
        raise ExportError(f"cannot load checkpoint {identifier!r}: {exc}")
    model.eval()
    return model, processor


def checkpoint_temperature(model) -> float:
    """Softmax temperature from the checkpoint's learned logit scale.

    Dual encoders store a scale s with logits = exp(s) * cosine, i.e. a
    temperature of 1/exp(s). Checkpoints without the parameter fall back
    to 0.01 with a warning.
    """
    scale = getattr(model, "logit_scale", None)
    if scale is None:
        warnings.warn(
            "checkpoint exposes no learned logit scale; "
            f"falling back to temperature {DEFAULT_TEMPERATURE}"
        )
        return DEFAULT_TEMPERATURE
    import torch

    with torch.no_grad():
        return float(1.0 / scale.exp().item())


def _pooled(output):
    # get_*_features returns a bare tensor on older transformers and a
    # pooling output (projected features in .pooler_output) on newer ones
    return getattr(output, "pooler_output", output)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ExportError("encoder produced a zero embedding")
    return x / norms


def encode_prompts(model, processor, manifest: ExportManifest) -> list:
    """One (J_c, D) array of unit-norm prompt embeddings per class."""
    import torch

    groups = []
    with torch.no_grad():
        for name in manifest.class_names:
            batch = processor(
                text=list(manifest.prompts[name]), padding=True, return_tensors="pt"
            )
            embedded = _pooled(model.get_text_features(**batch))
            groups.append(_normalize_rows(embedded.cpu().numpy()))
    return groups


def discover_images(manifest: ExportManifest) -> list:
    """(path, label) pairs, filename-sorted per class, label = class order."""
    items = []
    for label, name in enumerate(manifest.class_names):
        directory = os.path.join(manifest.image_root, name)
        if not os.path.isdir(directory):
            raise ExportError(f"no image directory for class {name!r}: {directory}")
        names = sorted(
            entry for entry in os.listdir(directory)
            if os.path.isfile(os.path.join(directory, entry))
        )
        if not names:
            log.warning("class %r has no images", name)
        items.extend((os.path.join(directory, entry), label) for entry in names)
    return items


def encode_images(model, processor, items, batch_size: int):
    """Encode readable images; skip broken files with a warning.

    Returns (features (N, D) unit-norm float64, labels (N,) int64) over
    the images that survived loading, in the input order.
    """
    import torch
    from PIL import Image

    loaded = []
    kept_labels = []
    for path, label in items:
        try:
            with Image.open(path) as img:
                loaded.append(img.convert("RGB"))
        except Exception as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            warnings.warn(f"skipping unreadable image {path}: {exc}")
            continue
        kept_labels.append(label)
    if not loaded:
        raise ExportError("no readable images found")
    chunks = []
    with torch.no_grad():
        for start in range(0, len(loaded), batch_size):
            batch = processor(
                images=loaded[start:start + batch_size], return_tensors="pt"
            )
            embedded = _pooled(model.get_image_features(**batch))
            chunks.append(embedded.cpu().numpy())
    features = _normalize_rows(np.concatenate(chunks, axis=0))
    return features, np.asarray(kept_labels, dtype=np.int64)


@dataclass(frozen=True)
class ExportResult:
    out: str
    num_classes: int
    num_samples: int
    num_train: int
    temperature: float


def export(manifest: ExportManifest, dump_prompt_embeddings: str | None = None) -> ExportResult:
    """Run the full pipeline and write one FCB1 bundle.

    Prototypes are the plain per-class means of the unit-norm prompt
    embeddings (not re-normalized). Splits: the first ``train_per_class``
    surviving images of each class go to train, the rest to test.
    """
    model, processor = load_checkpoint(manifest.checkpoint)
    temperature = checkpoint_temperature(model)
    groups = encode_prompts(model, processor, manifest)
    prototypes = np.stack([g.mean(axis=0) for g in groups])
    items = discover_images(manifest)
    features, labels = encode_images(model, processor, items, manifest.batch_size)

    train, test = [], []
    seen = {label: 0 for label in range(len(manifest.class_names))}
    for idx, label in enumerate(labels.tolist()):
        if seen[label] < manifest.train_per_class:
            train.append(idx)
        else:
            test.append(idx)
        seen[label] += 1
    write_fcb(
        manifest.out,
        class_names=list(manifest.class_names),
        temperature=temperature,
        prototypes=prototypes,
        features=features,
        labels=labels,
        splits={"train": train, "test": test},
    )
    if dump_prompt_embeddings:
        arrays = {f"prompts_{i:03d}": g for i, g in enumerate(groups)}
        arrays["class_names"] = np.asarray(manifest.class_names)
        np.savez(dump_prompt_embeddings, **arrays)
    return ExportResult(
        out=manifest.out,
        num_classes=len(manifest.class_names),
        num_samples=int(labels.size),
        num_train=len(train),
        temperature=temperature,
    )
