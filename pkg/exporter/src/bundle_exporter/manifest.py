"""Export job description: checkpoint, images, prompts, and output."""

from __future__ import annotations

import json
from dataclasses import dataclass, field


class ManifestError(Exception):
    """The export description is incomplete or inconsistent."""


@dataclass(frozen=True)
class ExportManifest:
    """Everything needed to turn a checkpoint and an image tree into a bundle.

    ``prompts`` maps each class name to its list of text prompts; the class
    order in ``class_names`` defines the integer labels. Images are read
    from ``<image_root>/<class_name>/``, so each image carries exactly one
    label. The first ``train_per_class`` images of each class (sorted by
    filename) form the train split, the rest the test split.
    """

    checkpoint: str
    image_root: str
    prompts: dict
    out: str
    class_names: tuple = ()
    batch_size: int = 8
    train_per_class: int = 0

    def __post_init__(self):
        if not self.checkpoint:
            raise ManifestError("a checkpoint identifier is required")
        if not self.image_root:
            raise ManifestError("an image root directory is required")
        if not self.out:
            raise ManifestError("an output path is required")
        if not isinstance(self.prompts, dict) or not self.prompts:
            raise ManifestError("prompts must map each class name to a prompt list")
        names = self.class_names or tuple(self.prompts)
        object.__setattr__(self, "class_names", tuple(str(n) for n in names))
        if len(set(self.class_names)) != len(self.class_names):
            raise ManifestError("class names must be unique")
        for name in self.class_names:
            plist = self.prompts.get(name)
            if not isinstance(plist, (list, tuple)) or len(plist) < 1:
                raise ManifestError(f"class {name!r} needs at least one prompt")
            if not all(isinstance(p, str) and p for p in plist):
                raise ManifestError(f"class {name!r} has an empty or non-text prompt")
        if self.batch_size < 1:
            raise ManifestError("batch size must be positive")
        if self.train_per_class < 0:
            raise ManifestError("train_per_class cannot be negative")


_FIELDS = ("checkpoint", "image_root", "prompts", "out", "class_names",
           "batch_size", "train_per_class")


def load_manifest(path: str, overrides: dict | None = None) -> ExportManifest:
    """Build a manifest from a JSON file, with flag values taking priority."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path!r}: {exc}")
    if not isinstance(data, dict):
        raise ManifestError("manifest must be a JSON object")
    unknown = set(data) - set(_FIELDS)
    if unknown:
        raise ManifestError(f"unknown manifest fields: {sorted(unknown)}")
    merged = dict(data)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    if "class_names" in merged and merged["class_names"] is not None:
        merged["class_names"] = tuple(merged["class_names"])
    return ExportManifest(**merged)
