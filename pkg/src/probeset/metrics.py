"""Evaluation measures for prediction sets and point predictions.

All functions accept prediction sets either as plain collections of label
indices or as objects exposing a ``members`` attribute, so the engine's
result types can be passed directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RunReport:
    """One experiment cell: configuration plus its measured outcomes.

    Metric fields are None when the cell does not produce them (accuracy
    runs have no coverage; split methods have no meaningful fit rate) or
    when the cell failed.
    """

    seed: int
    method: str
    probe: str
    score: str
    alpha: float | None
    k: int
    coverage: float | None = None
    avg_size: float | None = None
    ccv: float | None = None
    aca: float | None = None
    wall_ms: float | None = None
    fits_per_sec: float | None = None
    error: str | None = None


def _members(s) -> frozenset:
    return frozenset(getattr(s, "members", s))


def _check_aligned(sets, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if len(sets) == 0:
        raise ValueError("at least one prediction set is required")
    if labels.shape != (len(sets),):
        raise ValueError("one true label per prediction set is required")
    return labels


def coverage(sets, labels) -> float:
    """Fraction of test points whose true label is inside the set."""
    labels = _check_aligned(sets, labels)
    hits = sum(int(y) in _members(s) for s, y in zip(sets, labels))
    return hits / len(sets)


def avg_set_size(sets) -> float:
    """Arithmetic mean of the set cardinalities."""
    if len(sets) == 0:
        raise ValueError("at least one prediction set is required")
    return sum(len(_members(s)) for s in sets) / len(sets)


def ccv(sets, labels, alpha: float) -> float:
    """Class-conditioned coverage gap, in percentage points.

    Mean over the classes present in ``labels`` of the absolute deviation
    of that class's coverage from the 1 - alpha target, times 100. Classes
    with no test points are skipped. Zero iff every present class sits at
    the target exactly.
    """
    labels = _check_aligned(sets, labels)
    target = 1.0 - float(alpha)
    gaps = []
    covered = np.array([int(y) in _members(s) for s, y in zip(sets, labels)])
    for c in np.unique(labels):
        mask = labels == c
        gaps.append(abs(covered[mask].mean() - target))
    return 100.0 * float(np.mean(gaps))


def balanced_accuracy(point_preds, labels) -> float:
    """Mean per-class recall over the classes present in ``labels``."""
    preds = np.asarray(point_preds)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("at least one test point is required")
    if preds.shape != labels.shape:
        raise ValueError("one prediction per true label is required")
    recalls = []
    for c in np.unique(labels):
        mask = labels == c
        recalls.append((preds[mask] == c).mean())
    return float(np.mean(recalls))
