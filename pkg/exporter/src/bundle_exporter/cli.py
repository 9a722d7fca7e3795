"""Command-line entry points: ``export`` and ``validate``."""

from __future__ import annotations

import argparse
import json
import sys

from .encode import ExportError, export
from .fcb import FcbError, validate_fcb
from .manifest import ExportManifest, ManifestError, load_manifest


def _load_prompts_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read prompts file {path!r}: {exc}")
    if not isinstance(data, dict):
        raise ManifestError("prompts file must map class names to prompt lists")
    return data


def cmd_export(args) -> int:
    overrides = {
        "checkpoint": args.checkpoint,
        "image_root": args.image_root,
        "out": args.out,
        "class_names": args.class_names,
        "batch_size": args.batch_size,
        "train_per_class": args.train_per_class,
    }
    if args.prompts is not None:
        overrides["prompts"] = _load_prompts_file(args.prompts)
    if args.manifest:
        manifest = load_manifest(args.manifest, overrides)
    else:
        manifest = ExportManifest(**{k: v for k, v in overrides.items()
                                     if v is not None})
    result = export(manifest, dump_prompt_embeddings=args.dump_prompt_embeddings)
    print(f"wrote {result.out}: C={result.num_classes} N={result.num_samples} "
          f"(train {result.num_train}) temperature={result.temperature:.6g}")
    return 0


def cmd_validate(args) -> int:
    report = validate_fcb(args.path)
    print(report.summary)
    for line in report.warnings:
        print(f"warning: {line}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bundle-exporter",
        description="Extract image and prompt embeddings into FCB1 bundles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_export = sub.add_parser("export", help="encode images and prompts")
    p_export.add_argument("--manifest", help="JSON file with the full job description")
    p_export.add_argument("--checkpoint")
    p_export.add_argument("--image-root", dest="image_root")
    p_export.add_argument("--prompts", help="JSON file: class name -> prompt list")
    p_export.add_argument("--class-names", nargs="+", dest="class_names")
    p_export.add_argument("--out")
    p_export.add_argument("--batch-size", type=int, dest="batch_size")
    p_export.add_argument("--train-per-class", type=int, dest="train_per_class")
    p_export.add_argument("--dump-prompt-embeddings", dest="dump_prompt_embeddings",
                          help="also write per-class prompt embeddings to this .npz")
    p_export.set_defaults(func=cmd_export)

    p_validate = sub.add_parser("validate", help="check an existing bundle file")
    p_validate.add_argument("path")
    p_validate.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ManifestError, ExportError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FcbError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
