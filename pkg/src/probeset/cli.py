"""Command-line experiment runner.

Subcommands:

``synth``
    Generate a synthetic feature bundle and write it to disk.

``run``
    Execute a (seeds x alphas x shots) grid of conformal or accuracy-only
    experiments against one bundle and emit one CSV row per cell.

``bench``
    Time transductive refits per second, contrasting the incremental
    closed-form solver with gradient descent.

``report``
    Aggregate one or more result CSVs into a mean/std table per
    configuration.

Exit codes: 0 on full success, 1 when some grid cells failed (their rows
are kept, metrics empty), 2 on configuration or usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from .core import ProbeWeights, class_probabilities
from .data import SynthConfig, generate_synthetic, load_bundle, sample_balanced_shots, save_bundle
from .engine import fit_probe, run_adapt_scp, run_fca, run_scp_zero_shot
from .metrics import RunReport, avg_set_size, balanced_accuracy, ccv, coverage
from .probes import GdConfig, LambdaPolicy
from .scores import ScoreConfig

CSV_COLUMNS = (
    "seed", "method", "probe", "score", "alpha", "K",
    "coverage", "avg_size", "ccv", "aca", "wall_ms", "fits_per_sec",
)

METHODS = ("scp", "adapt-scp", "fca")

CONFORMAL_K_DEFAULT = (4, 8, 16)
ACCURACY_K_DEFAULT = (1, 2, 4, 8, 16)
ALPHA_DEFAULT = (0.1, 0.05)
SEED_COUNT_DEFAULT = 20


class UsageError(Exception):
    """Bad flags or spec file contents; maps to exit code 2."""


@dataclass(frozen=True)
class ExperimentSpec:
    """Fully resolved configuration for one ``run`` invocation."""

    bundle: str
    out: str
    method: str = "scp"
    probe: str = "zeroshot"
    score: str = "lac"
    alpha: tuple = ALPHA_DEFAULT
    k: tuple = ()
    seeds: tuple = tuple(range(SEED_COUNT_DEFAULT))
    lambda_policy: str = "adaptive"
    lambda_value: float = 1.0
    randomized: bool = False
    accuracy_only: bool = False
    force: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "scp" and self.probe != "zeroshot" and not self.accuracy_only:
            raise UsageError(
                "method 'scp' never adapts, so only probe 'zeroshot' makes sense; "
                "use method 'adapt-scp' to calibrate an adapted probe"
            )
        if not self.alpha or any(not 0 < a < 1 for a in self.alpha):
            raise UsageError("alpha values must lie strictly between 0 and 1")
        if not self.k or any(v < 1 for v in self.k):
            raise UsageError("shot counts must be positive")
        if not self.accuracy_only and min(self.k) < 4 and not self.force:
            raise UsageError(
                "conformal calibration on fewer than 4 shots per class is too "
                "unstable to report; pass --force to run anyway"
            )
        if not self.seeds:
            raise UsageError("at least one seed is required")
        if self.workers < 1:
            raise UsageError("workers must be positive")

    def lambda_policy_obj(self) -> LambdaPolicy:
        return LambdaPolicy(self.lambda_policy, self.lambda_value)


def _resolve_seeds(values) -> tuple:
    # one value means "this many seeds, 0..S-1"; several mean a literal list
    if values is None:
        return tuple(range(SEED_COUNT_DEFAULT))
    if len(values) == 1:
        count = values[0]
        if count < 1:
            raise UsageError("seed count must be positive")
        return tuple(range(count))
    return tuple(values)


def _spec_from_args(args) -> ExperimentSpec:
    merged = {}
    if args.spec is not None:
        try:
            with open(args.spec, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read spec file: {exc}")
        if not isinstance(loaded, dict):
            raise UsageError("spec file must hold a JSON object")
        known = {f.name for f in fields(ExperimentSpec)} | {"seeds"}
        for key in loaded:
            if key not in known:
                raise UsageError(f"unknown spec field {key!r}")
        merged.update(loaded)
    for name in ("bundle", "out", "method", "probe", "score", "lambda_policy",
                 "lambda_value", "workers"):
        value = getattr(args, name)
        if value is not None:
            merged[name] = value
    for name in ("randomized", "accuracy_only", "force"):
        if getattr(args, name):
            merged[name] = True
    if args.alpha is not None:
        merged["alpha"] = args.alpha
    if args.k is not None:
        merged["k"] = args.k
    if args.seeds is not None:
        merged["seeds"] = args.seeds
    # spec files may use a bare scalar where the CLI takes a list
    for name in ("seeds", "alpha", "k"):
        if name in merged and isinstance(merged[name], (int, float)):
            merged[name] = [merged[name]]
    if "seeds" in merged:
        merged["seeds"] = _resolve_seeds(list(merged["seeds"]))
    if "alpha" in merged:
        merged["alpha"] = tuple(merged["alpha"])
    if "k" in merged:
        merged["k"] = tuple(merged["k"])
    if "bundle" not in merged:
        raise UsageError("a bundle path is required (--bundle or spec file)")
    if "out" not in merged:
        raise UsageError("an output path is required (--out or spec file)")
    spec = ExperimentSpec(**merged)
    if not spec.k:
        default = ACCURACY_K_DEFAULT if spec.accuracy_only else CONFORMAL_K_DEFAULT
        spec = replace(spec, k=default)
    return spec


def _run_cell(bundle, spec: ExperimentSpec, seed: int, alpha, k: int) -> RunReport:
    base = dict(seed=seed, method=spec.method, probe=spec.probe, score=spec.score,
                alpha=alpha, k=k)
    cfg = ScoreConfig(kind=spec.score, randomized=spec.randomized)
    policy = spec.lambda_policy_obj()
    gd = GdConfig()
    t0 = time.perf_counter()
    try:
        if spec.accuracy_only:
            support = sample_balanced_shots(bundle, k, seed)
            weights = fit_probe(spec.probe, support, ProbeWeights(bundle.text_prototypes),
                                bundle.temperature, policy, gd)
            test_idx = bundle.split("test")
            probs = class_probabilities(bundle.features[test_idx], weights,
                                        bundle.temperature)
            aca = balanced_accuracy(np.argmax(probs, axis=1), bundle.labels[test_idx])
            wall = (time.perf_counter() - t0) * 1000.0
            return RunReport(**base, aca=aca, wall_ms=wall)
        if spec.method == "scp":
            res = run_scp_zero_shot(bundle, k, cfg, alpha, seed)
        elif spec.method == "adapt-scp":
            res = run_adapt_scp(bundle, k, spec.probe, cfg, alpha, seed,
                                lambda_policy=policy, gd_config=gd)
        else:
            res = run_fca(bundle, k, cfg, alpha, seed, lambda_policy=policy,
                          probe=spec.probe, gd_config=gd)
        wall = (time.perf_counter() - t0) * 1000.0
        fits_per_sec = None
        if spec.method == "fca" and res.fit_seconds > 0:
            fits_per_sec = res.fit_count / res.fit_seconds
        return RunReport(
            **base,
            coverage=coverage(res.sets, res.test_labels),
            avg_size=avg_set_size(res.sets),
            ccv=ccv(res.sets, res.test_labels, alpha),
            aca=balanced_accuracy(res.point_predictions, res.test_labels),
            wall_ms=wall,
            fits_per_sec=fits_per_sec,
        )
    except Exception as exc:  # noqa: BLE001  (cell isolation is the contract)
        return RunReport(**base, error=f"{type(exc).__name__}: {exc}")


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def _report_to_row(r: RunReport) -> list:
    alpha = None if r.alpha is None else r.alpha
    return [_format_cell(v) for v in (
        r.seed, r.method, r.probe, r.score, alpha, r.k,
        r.coverage, r.avg_size, r.ccv, r.aca, r.wall_ms, r.fits_per_sec,
    )]


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        num_classes=args.classes, dim=args.dim, train_per_class=args.train_per_class,
        test_size=args.test_size, concentration=args.concentration,
        prototype_noise=args.prototype_noise, separation=args.separation,
        seed=args.seed, temperature=args.temperature,
    )
    bundle = generate_synthetic(cfg)
    save_bundle(bundle, args.out)
    print(f"wrote {args.out}: C={bundle.num_classes} D={bundle.dim} "
          f"N={bundle.num_samples} tau={bundle.temperature}")
    return 0


def cmd_run(args) -> int:
    spec = _spec_from_args(args)
    try:
        bundle = load_bundle(spec.bundle)
    except Exception as exc:
        raise UsageError(f"cannot load bundle: {exc}")
    alphas = (None,) if spec.accuracy_only else spec.alpha
    cells = [(seed, alpha, k) for seed in spec.seeds for alpha in alphas for k in spec.k]
    with ThreadPoolExecutor(max_workers=spec.workers) as pool:
        reports = list(pool.map(
            lambda cell: _run_cell(bundle, spec, *cell), cells
        ))
    failed = [r for r in reports if r.error is not None]
    with open(spec.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow(_report_to_row(r))
    for r in failed:
        print(f"cell seed={r.seed} alpha={r.alpha} K={r.k} failed: {r.error}",
              file=sys.stderr)
    done = len(reports) - len(failed)
    print(f"wrote {spec.out}: {done}/{len(reports)} cells completed")
    return 0 if not failed else 1


def cmd_bench(args) -> int:
    try:
        bundle = load_bundle(args.bundle)
    except Exception as exc:
        raise UsageError(f"cannot load bundle: {exc}")
    cfg = ScoreConfig(kind=args.score)
    test_idx = bundle.split("test")
    lines = []
    rates = {}
    for probe, limit in (("sstext", args.test_points), ("gdlp", args.gdlp_test_points)):
        take = min(limit, test_idx.size)
        if take < 1:
            raise UsageError("bench needs at least one test point per probe")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = run_fca(
                bundle, args.k, cfg, args.alpha, args.seed, probe=probe,
                gd_config=GdConfig(epochs=args.gdlp_epochs),
                test_indices=test_idx[:take],
            )
        rate = res.fit_count / res.fit_seconds if res.fit_seconds > 0 else float("inf")
        rates[probe] = rate
        per_image_ms = 1000.0 * res.fit_seconds / take
        lines.append(
            f"probe={probe} fits={res.fit_count} fits_per_sec={rate:.1f} "
            f"per_image_ms={per_image_ms:.2f}"
        )
    lines.append(f"speedup sstext/gdlp = {rates['sstext'] / rates['gdlp']:.1f}x")
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0


_METRIC_COLUMNS = ("coverage", "avg_size", "ccv", "aca")


def cmd_report(args) -> int:
    rows = []
    for path in args.csv:
        try:
            with open(path, "r", encoding="utf-8", newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                if header != list(CSV_COLUMNS):
                    raise UsageError(f"{path}: unexpected CSV schema {header}")
                for row in reader:
                    if len(row) != len(CSV_COLUMNS):
                        raise UsageError(f"{path}: malformed row {row}")
                    rows.append(dict(zip(CSV_COLUMNS, row)))
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc}")
    if not rows:
        raise UsageError("no data rows found")
    groups = {}
    for row in rows:
        key = (row["method"], row["probe"], row["score"], row["alpha"], row["K"])
        groups.setdefault(key, []).append(row)
    header = ("method", "probe", "score", "alpha", "K", "n",
              "coverage", "avg_size", "ccv", "aca")
    out_rows = [header]
    for key in sorted(groups):
        bucket = groups[key]
        cells = [*key, str(len(bucket))]
        for metric in _METRIC_COLUMNS:
            values = [float(r[metric]) for r in bucket if r[metric] != ""]
            if not values:
                cells.append("-")
                continue
            mean = float(np.mean(values))
            std = float(np.std(values))
            text = f"{mean:.4f}±{std:.4f}"
            if metric == "coverage" and key[3] != "":
                # flag groups that miss the nominal 1 - alpha target
                if mean < 1.0 - float(key[3]):
                    text += " *"
            cells.append(text)
        out_rows.append(tuple(cells))
    widths = [max(len(str(r[i])) for r in out_rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
             for r in out_rows]
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="probeset",
        description="Conformal prediction experiments over feature bundles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic bundle")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--classes", type=int, default=5)
    p_synth.add_argument("--dim", type=int, default=32)
    p_synth.add_argument("--train-per-class", type=int, default=32)
    p_synth.add_argument("--test-size", type=int, default=2000)
    p_synth.add_argument("--concentration", type=float, default=2.0)
    p_synth.add_argument("--prototype-noise", type=float, default=0.3)
    p_synth.add_argument("--separation", type=float, default=1.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--temperature", type=float, default=0.01)
    p_synth.set_defaults(func=cmd_synth)

    p_run = sub.add_parser("run", help="run an experiment grid")
    p_run.add_argument("--spec", help="JSON file with ExperimentSpec fields")
    p_run.add_argument("--bundle")
    p_run.add_argument("--out")
    p_run.add_argument("--method", choices=METHODS)
    p_run.add_argument("--probe", choices=("zeroshot", "sstext", "simpleshot", "gdlp"))
    p_run.add_argument("--score", choices=("lac", "aps", "raps"))
    p_run.add_argument("--alpha", type=float, nargs="+")
    p_run.add_argument("--k", type=int, nargs="+")
    p_run.add_argument("--seeds", type=int, nargs="+",
                       help="one value: run seeds 0..S-1; several: this exact list")
    p_run.add_argument("--lambda-policy", choices=("adaptive", "fixed"),
                       dest="lambda_policy")
    p_run.add_argument("--lambda-value", type=float, dest="lambda_value")
    p_run.add_argument("--randomized", action="store_true")
    p_run.add_argument("--accuracy-only", action="store_true", dest="accuracy_only")
    p_run.add_argument("--force", action="store_true")
    p_run.add_argument("--workers", type=int)
    p_run.set_defaults(func=cmd_run)

    p_bench = sub.add_parser("bench", help="time transductive refits")
    p_bench.add_argument("--bundle", required=True)
    p_bench.add_argument("--k", type=int, default=16)
    p_bench.add_argument("--alpha", type=float, default=0.1)
    p_bench.add_argument("--score", choices=("lac", "aps", "raps"), default="lac")
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--test-points", type=int, default=50)
    p_bench.add_argument("--gdlp-test-points", type=int, default=2)
    p_bench.add_argument("--gdlp-epochs", type=int, default=300)
    p_bench.add_argument("--out")
    p_bench.set_defaults(func=cmd_bench)

    p_report = sub.add_parser("report", help="aggregate result CSVs")
    p_report.add_argument("csv", nargs="+")
    p_report.add_argument("--out")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
