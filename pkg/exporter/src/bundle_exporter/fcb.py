"""Reader-independent FCB1 container writing and validation.

Layout, all little-endian: 4 magic bytes "FCB1", a u32 header length H,
H bytes of UTF-8 JSON, then the payload: C*D float32 text prototypes
(row-major), N*D float32 features, N uint32 labels. The file length must
equal 8 + H + 4*(C*D + N*D + N) exactly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

MAGIC = b"FCB1"
VERSION = 1
NORM_WARN_TOLERANCE = 1e-4


class FcbError(Exception):
    """A file does not conform to the container format."""


def write_fcb(
    path: str,
    class_names: list,
    temperature: float,
    prototypes: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    splits: dict,
) -> None:
    """Serialize one bundle, atomically (temp file in place, then rename)."""
    prototypes = np.ascontiguousarray(prototypes, dtype="<f4")
    features = np.ascontiguousarray(features, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<u4")
    c, d = prototypes.shape
    n = features.shape[0]
    if features.ndim != 2 or features.shape[1] != d:
        raise ValueError("features and prototypes disagree on dimension")
    if labels.shape != (n,):
        raise ValueError("need exactly one label per feature row")
    header = {
        "version": VERSION,
        "dim": d,
        "num_classes": c,
        "class_names": list(class_names),
        "temperature": float(temperature),
        "num_samples": n,
        "splits": {k: [int(i) for i in v] for k, v in splits.items()},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".fcb.part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(prototypes.tobytes())
            fh.write(features.tobytes())
            fh.write(labels.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of checking one file against the container format."""

    dim: int
    num_classes: int
    num_samples: int
    temperature: float
    class_names: tuple
    max_feature_norm_deviation: float
    warnings: tuple

    @property
    def summary(self) -> str:
        return (f"OK: D={self.dim} C={self.num_classes} N={self.num_samples} "
                f"temperature={self.temperature:g}")


def validate_fcb(path: str) -> ValidationReport:
    """Re-check magic, header, payload sizes, and embedding norms.

    Raises FcbError with a message naming the failure: bad magic, version
    mismatch, malformed header, truncated payload, or payload size
    mismatch. Non-unit feature rows are reported as warnings, not errors.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise FcbError("bad magic: not an FCB1 file")
    (header_len,) = struct.unpack("<I", data[4:8])
    if 8 + header_len > len(data):
        raise FcbError("truncated payload: header extends past end of file")
    try:
        header = json.loads(data[8:8 + header_len].decode("utf-8"))
        version = header["version"]
        dim = int(header["dim"])
        num_classes = int(header["num_classes"])
        num_samples = int(header["num_samples"])
        class_names = tuple(str(x) for x in header["class_names"])
        temperature = float(header["temperature"])
        splits = header["splits"]
        split_train = list(splits["train"])
        split_test = list(splits["test"])
    except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        raise FcbError(f"malformed header: {exc}")
    if version != VERSION:
        raise FcbError(f"version mismatch: expected {VERSION}, found {version}")
    expected = 8 + header_len + 4 * (num_classes * dim + num_samples * dim + num_samples)
    if len(data) < expected:
        raise FcbError(
            f"truncated payload: file is {len(data)} bytes, header implies {expected}"
        )
    if len(data) > expected:
        raise FcbError(
            f"payload size mismatch: file is {len(data)} bytes, header implies {expected}"
        )
    offset = 8 + header_len
    proto_bytes = 4 * num_classes * dim
    feat_bytes = 4 * num_samples * dim
    features = np.frombuffer(
        data, dtype="<f4", count=num_samples * dim, offset=offset + proto_bytes
    ).reshape(num_samples, dim)
    labels = np.frombuffer(
        data, dtype="<u4", count=num_samples, offset=offset + proto_bytes + feat_bytes
    )
    warnings = []
    if len(class_names) != num_classes:
        raise FcbError("malformed header: class name count disagrees with num_classes")
    if num_samples and labels.max(initial=0) >= num_classes:
        raise FcbError("labels reference classes beyond num_classes")
    declared = sorted(split_train) + sorted(split_test)
    if any(i < 0 or i >= num_samples for i in declared):
        raise FcbError("split indices out of range")
    if set(split_train) & set(split_test):
        raise FcbError("train and test splits overlap")
    deviation = 0.0
    if num_samples:
        norms = np.linalg.norm(features.astype(np.float64), axis=1)
        deviation = float(np.max(np.abs(norms - 1.0)))
        if deviation > NORM_WARN_TOLERANCE:
            count = int(np.sum(np.abs(norms - 1.0) > NORM_WARN_TOLERANCE))
            warnings.append(
                f"{count} feature rows are not unit-norm "
                f"(max deviation {deviation:.3g})"
            )
    return ValidationReport(
        dim=dim,
        num_classes=num_classes,
        num_samples=num_samples,
        temperature=temperature,
        class_names=class_names,
        max_feature_norm_deviation=deviation,
        warnings=tuple(warnings),
    )
