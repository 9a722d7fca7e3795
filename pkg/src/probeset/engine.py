"""Split and full conformal prediction pipelines.

Three entry points mirror the supported pipelines:

``run_scp_zero_shot``
    Calibrate a score threshold on the balanced support set under the
    zero-shot prototypes, then threshold test scores.

``run_adapt_scp``
    Fit a probe on the support set, then calibrate on the same points.
    The double use deliberately breaks exchangeability; it exists as the
    baseline whose under-coverage the transductive path repairs.

``run_fca``
    For every test point and every candidate label, refit the probe on
    the support set augmented with that (point, label) pair, recompute
    the support scores under the refit probe, and admit the label when
    its own score does not exceed the finite-sample quantile of those
    support scores.

``fcp_pvalue_oracle`` is a brute-force rank-based reformulation of the
transductive decision, kept deliberately independent of the engine loop
so the two can be checked against each other.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import ProbeWeights, class_probabilities
from .data import FeatureBundle, sample_balanced_shots
from .probes import (
    GdConfig,
    LambdaPolicy,
    SupportSet,
    gd_lp_fit,
    simpleshot_fit,
    sstext_class_sums,
    sstext_fit,
    sstext_fit_incremental,
)
from .rng import STREAM_CAL_U, STREAM_TEST_U, rng_for
from .scores import ScoreConfig, score_matrix

PROBE_KINDS = ("zeroshot", "sstext", "simpleshot", "gdlp")

#: Relative slack when turning the quantile index formula into an integer:
#: (N+1)*(1-alpha) computed in floats can land a hair above the exact
#: integer it represents (e.g. 10*0.9 = 9.000000000000002), and a plain
#: ceil would then overshoot by one rank.
_CEIL_EPS = 1e-9


@dataclass(frozen=True)
class CalibrationResult:
    """A calibrated score threshold and the sample size behind it."""

    threshold: float
    n_calibration: int
    alpha: float


@dataclass(frozen=True)
class PredictionSet:
    """Labels admitted for one test point.

    ``members`` is an ascending tuple of class indices and may be empty.
    ``per_label_thresholds`` is populated by the transductive path only:
    entry y is the quantile the candidate label y was compared against.
    """

    members: tuple
    point_prediction: int
    per_label_thresholds: np.ndarray | None = None

    def __contains__(self, label: int) -> bool:
        return int(label) in self.members


@dataclass(frozen=True)
class RunResult:
    """Per-test prediction sets plus bookkeeping for one pipeline run."""

    sets: list
    test_labels: np.ndarray
    fit_count: int
    fit_seconds: float

    @property
    def point_predictions(self) -> np.ndarray:
        return np.array([s.point_prediction for s in self.sets], dtype=np.int64)


def conformal_quantile(scores: np.ndarray, alpha: float) -> float:
    """Finite-sample-corrected upper quantile of calibration scores.

    Returns the k-th smallest score with k = ceil((N+1)(1-alpha)), or
    +infinity when k exceeds N (too few points for the requested level).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 1:
        raise ValueError("at least one calibration score is required")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie strictly between 0 and 1, got {alpha}")
    n = scores.size
    target = (n + 1) * (1.0 - alpha)
    k = int(np.ceil(target - _CEIL_EPS * max(1.0, target)))
    if k > n:
        return float("inf")
    return float(np.partition(scores, k - 1)[k - 1])


def scp_calibrate(
    probs: np.ndarray,
    labels: np.ndarray,
    cfg: ScoreConfig,
    alpha: float,
    rng: np.random.Generator | None = None,
) -> CalibrationResult:
    """Score each calibration point at its true label and take the quantile."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ValueError("need one label per probability row")
    u = _draw_u(cfg, rng, probs.shape[0])
    all_scores = score_matrix(probs, cfg, u)
    scores = all_scores[np.arange(labels.size), labels]
    return CalibrationResult(conformal_quantile(scores, alpha), labels.size, float(alpha))


def scp_predict(
    p: np.ndarray,
    cal: CalibrationResult,
    cfg: ScoreConfig,
    rng: np.random.Generator | None = None,
) -> PredictionSet:
    """Admit every label whose score is within the calibrated threshold."""
    u = _draw_u(cfg, rng, 1)
    scores = score_matrix(np.asarray(p, dtype=np.float64)[None, :], cfg, u)[0]
    members = tuple(int(y) for y in np.flatnonzero(scores <= cal.threshold))
    return PredictionSet(members, int(np.argmax(p)))


def _draw_u(cfg: ScoreConfig, rng: np.random.Generator | None, size: int):
    if not cfg.randomized:
        return None
    if rng is None:
        raise ValueError("randomized scores require an rng stream")
    return rng.uniform(size=size)


def fit_probe(
    probe: str,
    support: SupportSet,
    text: ProbeWeights,
    tau: float,
    lambda_policy: LambdaPolicy,
    gd_config: GdConfig,
) -> ProbeWeights:
    if probe == "zeroshot":
        return text
    if probe == "sstext":
        return sstext_fit(support, text, tau, lambda_policy)
    if probe == "simpleshot":
        return simpleshot_fit(support, text.num_classes)
    if probe == "gdlp":
        return gd_lp_fit(support, text, tau, gd_config)
    raise ValueError(f"unknown probe {probe!r}; expected one of {PROBE_KINDS}")


def _split_pipeline(
    bundle: FeatureBundle,
    k: int,
    probe: str,
    cfg: ScoreConfig,
    alpha: float,
    seed: int,
    lambda_policy: LambdaPolicy,
    gd_config: GdConfig,
    test_indices: np.ndarray | None,
) -> RunResult:
    support = sample_balanced_shots(bundle, k, seed)
    text = ProbeWeights(bundle.text_prototypes)
    tau = bundle.temperature
    t0 = time.perf_counter()
    weights = fit_probe(probe, support, text, tau, lambda_policy, gd_config)
    fit_seconds = time.perf_counter() - t0
    cal_probs = class_probabilities(support.features, weights, tau)
    cal = scp_calibrate(cal_probs, support.labels, cfg, alpha, rng_for(seed, STREAM_CAL_U))
    test_idx = bundle.split("test") if test_indices is None else np.asarray(test_indices)
    test_probs = class_probabilities(bundle.features[test_idx], weights, tau)
    sets = [
        scp_predict(test_probs[m], cal, cfg, rng_for(seed, STREAM_TEST_U, m))
        for m in range(test_idx.size)
    ]
    fit_count = 0 if probe == "zeroshot" else 1
    return RunResult(sets, bundle.labels[test_idx], fit_count, fit_seconds)


def run_scp_zero_shot(
    bundle: FeatureBundle,
    k: int,
    cfg: ScoreConfig,
    alpha: float,
    seed: int,
    test_indices: np.ndarray | None = None,
) -> RunResult:
    """Split conformal prediction over the zero-shot classifier.

    The balanced K-shot support set serves as the calibration set; no
    adaptation happens.
    """
    return _split_pipeline(
        bundle, k, "zeroshot", cfg, alpha, seed, LambdaPolicy(), GdConfig(), test_indices
    )


def run_adapt_scp(
    bundle: FeatureBundle,
    k: int,
    probe: str,
    cfg: ScoreConfig,
    alpha: float,
    seed: int,
    lambda_policy: LambdaPolicy = LambdaPolicy(),
    gd_config: GdConfig = GdConfig(),
    test_indices: np.ndarray | None = None,
) -> RunResult:
    """Adapt on the support set, then calibrate on those same points.

    Reusing the fitting data as calibration data breaks exchangeability
    between calibration and test scores, so the nominal coverage level is
    not guaranteed; this pipeline exists as the baseline for exactly that
    failure.
    """
    return _split_pipeline(
        bundle, k, probe, cfg, alpha, seed, lambda_policy, gd_config, test_indices
    )


def run_fca(
    bundle: FeatureBundle,
    k: int,
    cfg: ScoreConfig,
    alpha: float,
    seed: int,
    lambda_policy: LambdaPolicy = LambdaPolicy(),
    probe: str = "sstext",
    gd_config: GdConfig = GdConfig(),
    test_indices: np.ndarray | None = None,
) -> RunResult:
    """Transductive conformal adaptation over the same support set.

    For each test embedding v and candidate label y, the probe is refit
    on the support set plus (v, y); the support scores are recomputed
    under that refit probe; y is admitted when its own score is within
    their finite-sample quantile. Point predictions come from the probe
    fitted on the support set alone, so accuracy matches the split
    pipeline with the same probe and seed.
    """
    if probe not in PROBE_KINDS:
        raise ValueError(f"unknown probe {probe!r}; expected one of {PROBE_KINDS}")
    if probe in ("gdlp", "simpleshot"):
        warnings.warn(
            f"transductive {probe} has no incremental solver: every one of the "
            "num_test * num_classes refits re-reads the whole support set",
            stacklevel=2,
        )
    support = sample_balanced_shots(bundle, k, seed)
    text = ProbeWeights(bundle.text_prototypes)
    tau = bundle.temperature
    c = bundle.num_classes
    n = support.num_samples
    test_idx = bundle.split("test") if test_indices is None else np.asarray(test_indices)

    point_weights = fit_probe(probe, support, text, tau, lambda_policy, gd_config)
    point_preds = np.argmax(
        class_probabilities(bundle.features[test_idx], point_weights, tau), axis=1
    )

    u_cal = _draw_u(cfg, rng_for(seed, STREAM_CAL_U), n)
    base_sums = sstext_class_sums(support, c) if probe == "sstext" else None
    rows = np.arange(n)
    sets = []
    fit_count = 0
    t0 = time.perf_counter()
    for m in range(test_idx.size):
        v = bundle.features[test_idx[m]]
        u_m = None
        u_aug = None
        if cfg.randomized:
            u_m = rng_for(seed, STREAM_TEST_U, m).uniform()
            u_aug = np.concatenate([u_cal, [u_m]])
        aug_features = np.vstack([support.features, v[None, :]])
        members = []
        thresholds = np.empty(c)
        for y in range(c):
            if probe == "sstext":
                w_y = sstext_fit_incremental(base_sums, text, tau, v, y, lambda_policy)
            else:
                w_y = fit_probe(
                    probe, support.append(v, y), text, tau, lambda_policy, gd_config
                )
            fit_count += 1
            probs = class_probabilities(aug_features, w_y, tau)
            scores = score_matrix(probs, cfg, u_aug)
            support_scores = scores[rows, support.labels]
            thresholds[y] = conformal_quantile(support_scores, alpha)
            if scores[n, y] <= thresholds[y]:
                members.append(y)
        sets.append(PredictionSet(tuple(members), int(point_preds[m]), thresholds))
    fit_seconds = time.perf_counter() - t0
    return RunResult(sets, bundle.labels[test_idx], fit_count, fit_seconds)


def fcp_pvalue_oracle(
    adaptation: SupportSet,
    test_feature: np.ndarray,
    candidate_label: int,
    cfg: ScoreConfig,
    probe_fitter: Callable[[SupportSet], ProbeWeights],
    tau: float,
    u_adapt: np.ndarray | None = None,
    u_test: float | None = None,
) -> float:
    """Rank-based transductive p-value for one candidate label.

    Fits on the augmented set via ``probe_fitter``, scores all N+1 points
    (adaptation points at their true labels, the test point at the
    candidate), and returns (|{i : s_i >= s_test}| + 1) / (N + 1). The
    decision rule {y : p > alpha} reproduces the engine's set on
    tie-free instances. Brute force; meant for testing.
    """
    aug = adaptation.append(test_feature, int(candidate_label))
    weights = probe_fitter(aug)
    probs = class_probabilities(aug.features, weights, tau)
    u_all = None
    if cfg.randomized:
        if u_adapt is None or u_test is None:
            raise ValueError("randomized scores require u draws for all points")
        u_all = np.concatenate([np.asarray(u_adapt, dtype=np.float64), [float(u_test)]])
    scores = score_matrix(probs, cfg, u_all)
    n = adaptation.num_samples
    adapt_scores = scores[np.arange(n), adaptation.labels]
    test_score = scores[n, int(candidate_label)]
    return (int(np.count_nonzero(adapt_scores >= test_score)) + 1) / (n + 1)
