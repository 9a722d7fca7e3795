"""Feature-bundle persistence, balanced shot sampling, synthetic data.

The on-disk format ("FCB1", little-endian) is:

====================  =========================================
bytes 0-3             magic ASCII ``FCB1``
bytes 4-7             unsigned 32-bit header length H
bytes 8 .. 8+H        UTF-8 JSON header
then                  text prototypes, C*D float32, row-major
then                  features, N*D float32, row-major
then                  labels, N uint32
====================  =========================================

The JSON header carries version, dim, num_classes, class_names,
temperature, num_samples, and named splits. The file length must equal
8 + H + 4*(C*D + N*D + N) exactly.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .probes import SupportSet
from .rng import STREAM_SHOTS, STREAM_SYNTH, rng_for

FCB1_MAGIC = b"FCB1"
FCB1_VERSION = 1

#: Feature rows whose norm deviates from 1 by more than this are
#: renormalized on load (with a warning).
NORM_TOLERANCE = 1e-4


class BundleFormatError(Exception):
    """Base class for FCB1 parsing failures."""


class BadMagicError(BundleFormatError):
    pass


class VersionMismatchError(BundleFormatError):
    pass


class TruncatedPayloadError(BundleFormatError):
    pass


class PayloadSizeMismatchError(BundleFormatError):
    pass


class MalformedHeaderError(BundleFormatError):
    pass


@dataclass(frozen=True)
class FeatureBundle:
    """Pre-extracted embeddings plus everything needed to classify them.

    ``features`` rows are unit-norm within 1e-4. ``text_prototypes`` rows
    are prompt-embedding means and may be shorter than unit length.
    ``splits`` maps names (typically "train" and "test") to index arrays;
    train and test must not overlap.
    """

    class_names: tuple
    temperature: float
    text_prototypes: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    splits: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        protos = np.asarray(self.text_prototypes, dtype=np.float64)
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        names = tuple(str(n) for n in self.class_names)
        if protos.ndim != 2 or len(names) != protos.shape[0]:
            raise ValueError("one class name per prototype row is required")
        if feats.ndim != 2 or feats.shape[1] != protos.shape[1]:
            raise ValueError("features and prototypes disagree on dim")
        if labels.shape != (feats.shape[0],):
            raise ValueError("one label per feature row is required")
        if labels.size and (labels.min() < 0 or labels.max() >= len(names)):
            raise ValueError("labels must lie in [0, num_classes)")
        if float(self.temperature) <= 0 or not np.isfinite(self.temperature):
            raise ValueError("temperature must be positive")
        if not (np.isfinite(protos).all() and np.isfinite(feats).all()):
            raise ValueError("bundle arrays must be finite")
        if feats.size:
            norms = np.linalg.norm(feats, axis=1)
            if np.max(np.abs(norms - 1.0)) > NORM_TOLERANCE:
                raise ValueError(
                    "feature rows must be unit-norm within "
                    f"{NORM_TOLERANCE}; worst deviation "
                    f"{float(np.max(np.abs(norms - 1.0))):.3g}"
                )
        splits = {}
        seen = {}
        for name, idx in dict(self.splits).items():
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= feats.shape[0]):
                raise ValueError(f"split {name!r} has out-of-range indices")
            if idx.size != np.unique(idx).size:
                raise ValueError(f"split {name!r} has duplicate indices")
            splits[str(name)] = idx
            seen[str(name)] = set(idx.tolist())
        if "train" in seen and "test" in seen and seen["train"] & seen["test"]:
            raise ValueError("train and test splits overlap")
        object.__setattr__(self, "class_names", names)
        object.__setattr__(self, "temperature", float(self.temperature))
        object.__setattr__(self, "text_prototypes", protos)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "splits", splits)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int:
        return self.text_prototypes.shape[1]

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    def split(self, name: str) -> np.ndarray:
        try:
            return self.splits[name]
        except KeyError:
            raise KeyError(
                f"bundle has no {name!r} split; available: {sorted(self.splits)}"
            ) from None


def save_bundle(bundle: FeatureBundle, path) -> None:
    """Write a bundle in the FCB1 format (deterministic bytes)."""
    header = {
        "version": FCB1_VERSION,
        "dim": bundle.dim,
        "num_classes": bundle.num_classes,
        "class_names": list(bundle.class_names),
        "temperature": bundle.temperature,
        "num_samples": bundle.num_samples,
        "splits": {k: v.tolist() for k, v in sorted(bundle.splits.items())},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FCB1_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(bundle.text_prototypes, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(bundle.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(bundle.labels, dtype="<u4").tobytes())


def _header_field(header: dict, key: str, kinds) -> object:
    if key not in header:
        raise MalformedHeaderError(f"header is missing {key!r}")
    value = header[key]
    if not isinstance(value, kinds):
        raise MalformedHeaderError(f"header field {key!r} has the wrong type")
    return value


def load_bundle(path) -> FeatureBundle:
    """Read an FCB1 file, validating structure and feature norms.

    Feature rows off unit norm by more than 1e-4 are renormalized with a
    warning; everything else must already be consistent or a
    :class:`BundleFormatError` subclass is raised.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != FCB1_MAGIC:
        raise BadMagicError(f"{path}: not an FCB1 file (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise TruncatedPayloadError(f"{path}: header extends past end of file")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: header must be a JSON object")
    version = _header_field(header, "version", int)
    if version != FCB1_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FCB1_VERSION}")
    dim = _header_field(header, "dim", int)
    num_classes = _header_field(header, "num_classes", int)
    num_samples = _header_field(header, "num_samples", int)
    class_names = _header_field(header, "class_names", list)
    temperature = _header_field(header, "temperature", (int, float))
    splits = _header_field(header, "splits", dict)
    if min(dim, num_classes) < 1 or num_samples < 0:
        raise MalformedHeaderError(f"{path}: non-positive dimensions in header")
    if len(class_names) != num_classes:
        raise MalformedHeaderError(
            f"{path}: {len(class_names)} class names for {num_classes} classes"
        )
    expected = 8 + header_len + 4 * (num_classes * dim + num_samples * dim + num_samples)
    if len(raw) < expected:
        raise TruncatedPayloadError(
            f"{path}: file has {len(raw)} bytes, header implies {expected}"
        )
    if len(raw) > expected:
        raise PayloadSizeMismatchError(
            f"{path}: file has {len(raw)} bytes, header implies {expected}"
        )
    offset = 8 + header_len
    protos = np.frombuffer(raw, dtype="<f4", count=num_classes * dim, offset=offset)
    offset += 4 * num_classes * dim
    feats = np.frombuffer(raw, dtype="<f4", count=num_samples * dim, offset=offset)
    offset += 4 * num_samples * dim
    labels = np.frombuffer(raw, dtype="<u4", count=num_samples, offset=offset)
    protos = protos.reshape(num_classes, dim).astype(np.float64)
    feats = feats.reshape(num_samples, dim).astype(np.float64)
    if feats.size:
        norms = np.linalg.norm(feats, axis=1)
        off = np.abs(norms - 1.0) > NORM_TOLERANCE
        if off.any():
            if np.any(norms[off] == 0.0):
                raise ValueError(f"{path}: degenerate all-zero feature row")
            warnings.warn(
                f"{path}: renormalized {int(off.sum())} feature rows whose norm "
                f"deviated from 1 by more than {NORM_TOLERANCE}",
                stacklevel=2,
            )
            feats[off] /= norms[off, None]
    return FeatureBundle(
        class_names=tuple(class_names),
        temperature=float(temperature),
        text_prototypes=protos,
        features=feats,
        labels=labels.astype(np.int64),
        splits=splits,
    )


def sample_balanced_shots(bundle: FeatureBundle, k: int, seed: int) -> SupportSet:
    """Draw exactly ``k`` train examples per class, without replacement.

    Deterministic given (bundle, k, seed): classes are visited in
    ascending index order against a seed-derived stream.
    """
    k = int(k)
    if k < 1:
        raise ValueError("k must be at least 1")
    train = bundle.split("train")
    labels = bundle.labels[train]
    rng = rng_for(seed, STREAM_SHOTS)
    chosen = []
    for c in range(bundle.num_classes):
        pool = train[labels == c]
        if pool.size < k:
            raise ValueError(
                f"class {bundle.class_names[c]!r} has only {pool.size} train "
                f"samples, need {k}"
            )
        chosen.append(rng.choice(pool, size=k, replace=False))
    idx = np.concatenate(chosen)
    return SupportSet(bundle.features[idx], bundle.labels[idx], shots_per_class=k)


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic exchangeable-data generator.

    Classes live on quasi-orthogonal directions scaled by ``separation``;
    samples add isotropic Gaussian noise with standard deviation
    ``1 / concentration`` and are then normalized to the unit sphere. Text
    prototypes are the class directions corrupted by ``prototype_noise``.
    The stored ``temperature`` mimics contrastive-pretraining logit
    scales by default.
    """

    num_classes: int = 5
    dim: int = 32
    train_per_class: int = 32
    test_size: int = 2000
    concentration: float = 2.0
    prototype_noise: float = 0.3
    separation: float = 1.0
    seed: int = 0
    temperature: float = 0.01

    def __post_init__(self) -> None:
        if self.num_classes < 1 or self.dim < 1:
            raise ValueError("num_classes and dim must be positive")
        if self.train_per_class < 1 or self.test_size < 1:
            raise ValueError("train_per_class and test_size must be positive")
        if self.concentration <= 0:
            raise ValueError("concentration must be positive")
        if self.prototype_noise < 0 or self.separation < 0:
            raise ValueError("prototype_noise and separation must be nonnegative")
        if self.separation == 0 and self.prototype_noise == 0:
            raise ValueError("all-zero prototypes: set separation or prototype_noise")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.dim < self.num_classes:
            raise ValueError(
                "quasi-orthogonal class directions require dim >= num_classes"
            )


def _normalize_rows_f32(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("degenerate zero row generated; increase concentration")
    # Store at 32-bit precision (and carry exactly that in memory) so a
    # save/load round trip is bit-identical.
    return (rows / norms).astype(np.float32).astype(np.float64)


def generate_synthetic(cfg: SynthConfig) -> FeatureBundle:
    """Build a bundle whose train and test points share one mixture law.

    Test labels are i.i.d. uniform over classes; the train block holds
    ``train_per_class`` samples per class so that balanced shot sampling
    never starves. Same config (including seed) gives identical bytes.
    """
    rng = rng_for(cfg.seed, STREAM_SYNTH)
    c, d = cfg.num_classes, cfg.dim
    sigma = 1.0 / cfg.concentration
    # Orthonormal directions via QR, sign-fixed to make them unique.
    gauss = rng.normal(size=(d, c))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))
    means = cfg.separation * q.T  # (C, D)

    train_labels = np.repeat(np.arange(c), cfg.train_per_class)
    train_feats = means[train_labels] + sigma * rng.normal(size=(train_labels.size, d))
    test_labels = rng.integers(0, c, size=cfg.test_size)
    test_feats = means[test_labels] + sigma * rng.normal(size=(cfg.test_size, d))
    protos = means + cfg.prototype_noise * rng.normal(size=(c, d))

    features = _normalize_rows_f32(np.vstack([train_feats, test_feats]))
    prototypes = _normalize_rows_f32(protos)
    n_train = train_labels.size
    return FeatureBundle(
        class_names=tuple(f"class_{i}" for i in range(c)),
        temperature=cfg.temperature,
        text_prototypes=prototypes,
        features=features,
        labels=np.concatenate([train_labels, test_labels]),
        splits={
            "train": np.arange(n_train),
            "test": np.arange(n_train, n_train + cfg.test_size),
        },
    )
