"""Feature extraction from dual-encoder checkpoints into FCB1 bundles."""

from .encode import ExportError, ExportResult, checkpoint_temperature, export
from .fcb import FcbError, ValidationReport, validate_fcb, write_fcb
from .manifest import ExportManifest, ManifestError, load_manifest

__all__ = [
    "ExportError",
    "ExportManifest",
    "ExportResult",
    "FcbError",
    "ManifestError",
    "ValidationReport",
    "checkpoint_temperature",
    "export",
    "load_manifest",
    "validate_fcb",
    "write_fcb",
]

__version__ = "0.1.0"
