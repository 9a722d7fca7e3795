"""Nonconformity scores over predicted class probabilities.

Three families are provided. ``lac`` is one minus the true-class
probability. ``aps`` is the cumulative probability mass of all classes at
least as probable as the candidate, with ties broken by ascending class
index. ``raps`` adds a rank penalty beyond a regularization threshold to
the ``aps`` value.

Randomized variants subtract ``u * p_label`` from the cumulative mass,
where ``u`` is drawn uniformly from [0, 1) once per (calibration or test)
point and shared across every candidate label for that point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCORE_KINDS = ("lac", "aps", "raps")


@dataclass(frozen=True)
class ScoreConfig:
    """Selects a score family and its knobs.

    ``raps_k_reg`` is the 1-based rank beyond which the penalty applies and
    ``raps_lambda`` is the per-rank penalty weight; both are ignored by the
    other families. ``randomized`` switches aps/raps to their smoothed
    variants and has no effect on lac.
    """

    kind: str = "lac"
    raps_k_reg: int = 1
    raps_lambda: float = 0.001
    randomized: bool = False

    def __post_init__(self) -> None:
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}; expected one of {SCORE_KINDS}")
        if self.raps_k_reg < 0:
            raise ValueError("raps_k_reg must be nonnegative")
        if self.raps_lambda < 0:
            raise ValueError("raps_lambda must be nonnegative")


def _check_probs(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 1:
        raise ValueError("probs must be a 1-d probability vector")
    if np.any(p < 0) or not np.isfinite(p).all():
        raise ValueError("probs must be finite and nonnegative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probs must sum to 1, got {p.sum()!r}")
    return p


def _check_label(probs: np.ndarray, label: int) -> int:
    label = int(label)
    if not 0 <= label < probs.shape[0]:
        raise ValueError(f"label {label} out of range for {probs.shape[0]} classes")
    return label


def _check_u(u: float) -> float:
    u = float(u)
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"randomization draw must lie in [0, 1], got {u}")
    return u


def _check_prob_matrix(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] < 1:
        raise ValueError("probs must be a (num_points, num_classes) matrix")
    if np.any(p < 0) or not np.isfinite(p).all():
        raise ValueError("probs must be finite and nonnegative")
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ValueError("every probs row must sum to 1")
    return p


def _cumulative_and_ranks_matrix(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise inclusive cumulative mass and 1-based greedy rank.

    Classes are taken in order of descending probability; equal
    probabilities keep ascending class index (stable sort of the negated
    row), so the ordering is deterministic.
    """
    order = np.argsort(-p, axis=1, kind="stable")
    csum = np.cumsum(np.take_along_axis(p, order, axis=1), axis=1)
    cumulative = np.empty_like(p)
    np.put_along_axis(cumulative, order, csum, axis=1)
    ranks = np.empty(p.shape, dtype=np.int64)
    np.put_along_axis(
        ranks, order, np.broadcast_to(np.arange(1, p.shape[1] + 1), p.shape), axis=1
    )
    return cumulative, ranks


def _cumulative_and_ranks(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cumulative, ranks = _cumulative_and_ranks_matrix(p[None, :])
    return cumulative[0], ranks[0]


def lac_score(probs: np.ndarray, label: int) -> float:
    """One minus the probability assigned to ``label``."""
    p = _check_probs(probs)
    label = _check_label(p, label)
    return 1.0 - p[label]


def aps_score(probs: np.ndarray, label: int, u: float | None = None) -> float:
    """Cumulative descending-sorted mass up to and including ``label``.

    With ``u`` given, the label's own mass is partially discounted:
    ``score - u * p_label``.
    """
    p = _check_probs(probs)
    label = _check_label(p, label)
    cumulative, _ = _cumulative_and_ranks(p)
    s = cumulative[label]
    if u is not None:
        s -= _check_u(u) * p[label]
    return float(s)


def raps_score(
    probs: np.ndarray,
    label: int,
    cfg: ScoreConfig | None = None,
    u: float | None = None,
) -> float:
    """Rank-regularized variant of :func:`aps_score`.

    Adds ``cfg.raps_lambda * max(0, rank - cfg.raps_k_reg)`` where ``rank``
    is the label's 1-based position in the descending probability ordering.
    ``cfg`` defaults to the standard knobs (k_reg=1, lambda=0.001).
    """
    if cfg is None:
        cfg = ScoreConfig(kind="raps")
    p = _check_probs(probs)
    label = _check_label(p, label)
    cumulative, ranks = _cumulative_and_ranks(p)
    s = cumulative[label]
    if u is not None:
        s -= _check_u(u) * p[label]
    return float(s + cfg.raps_lambda * max(0, int(ranks[label]) - cfg.raps_k_reg))


def score_matrix(
    probs: np.ndarray, config: ScoreConfig, u: np.ndarray | None = None
) -> np.ndarray:
    """All-label scores for a batch of probability vectors.

    Row i of the result scores every candidate label of ``probs[i]``.
    With ``config.randomized`` set, ``u`` must hold one draw per row,
    shared across that row's labels.
    """
    p = _check_prob_matrix(probs)
    if config.randomized:
        if u is None:
            raise ValueError("randomized scores require one u draw per row")
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (p.shape[0],):
            raise ValueError("need exactly one u draw per probs row")
        if np.any(u < 0) or np.any(u > 1):
            raise ValueError("randomization draws must lie in [0, 1]")
    if config.kind == "lac":
        return 1.0 - p
    s, ranks = _cumulative_and_ranks_matrix(p)
    if config.randomized:
        s = s - u[:, None] * p
    if config.kind == "raps":
        s = s + config.raps_lambda * np.maximum(0, ranks - config.raps_k_reg)
    return s


def score_all_labels(
    probs: np.ndarray, config: ScoreConfig, u: float | None = None
) -> np.ndarray:
    """Score every candidate label of one probability vector at once.

    The result's entry ``y`` equals the per-label function applied to
    ``(probs, y)``. When ``config.randomized`` is set, ``u`` is required
    and is shared across all labels; otherwise ``u`` is ignored.
    """
    p = _check_probs(probs)
    if config.randomized and u is not None:
        u = _check_u(u)
    return score_matrix(
        p[None, :], config, None if u is None else np.array([u], dtype=np.float64)
    )[0]
