"""Vector and matrix kernels shared by every other module.

All arithmetic is carried out in 64-bit floats regardless of the storage
precision of the inputs; file formats downcast to 32-bit on write.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

#: Tolerance for the "normalized" invariant on embeddings.
UNIT_NORM_ATOL = 1e-6


@dataclass(frozen=True)
class ProbeWeights:
    """A class-prototype matrix turning embeddings into class scores.

    Parameters
    ----------
    matrix : np.ndarray
        Array of shape (C, D) holding one prototype row per class.
    normalized : bool
        True when the rows were re-normalized to unit length after
        construction. Solvers leave this False by default.
    """

    matrix: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise ValueError("probe weights must form a (num_classes, dim) matrix")
        object.__setattr__(self, "matrix", m)

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def check_temperature(tau: float) -> float:
    """Validate a softmax temperature, returning it as a float."""
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0.0:
        raise ValueError(f"temperature must be a positive real, got {tau}")
    return tau


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm, preserving direction.

    Raises
    ------
    ValueError
        If the input is the zero vector ("degenerate embedding").
    """
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("degenerate embedding: zero vector cannot be normalized")
    return v / norm


def normalize_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise counterpart of :func:`l2_normalize`."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("degenerate embedding: zero row cannot be normalized")
    return m / norms


def class_probabilities(features: np.ndarray, weights: ProbeWeights, tau: float) -> np.ndarray:
    """Temperature-scaled softmax over prototype dot products, batched.

    Parameters
    ----------
    features : np.ndarray
        Shape (N, D); one embedding per row.
    weights : ProbeWeights
        Shape (C, D) prototypes.
    tau : float
        Positive softmax temperature; logits are dot products divided by tau.

    Returns
    -------
    np.ndarray
        Shape (N, C); rows sum to 1.
    """
    tau = check_temperature(tau)
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError("features must be a (num_samples, dim) matrix")
    if feats.shape[1] != weights.dim:
        raise ValueError(
            f"dimension mismatch: features have dim {feats.shape[1]}, "
            f"weights have dim {weights.dim}"
        )
    logits = feats @ weights.matrix.T / tau
    # Max-logit subtraction: small temperatures push logits to +-1/tau scale.
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits


def softmax_probs(v: np.ndarray, weights: ProbeWeights, tau: float) -> np.ndarray:
    """Predicted class probabilities for a single embedding.

    Computes ``p_c = exp(v . w_c / tau) / sum_j exp(v . w_j / tau)`` in a
    numerically stable form.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("expected a single embedding vector")
    return class_probabilities(v[None, :], weights, tau)[0]


def zero_shot_prototypes(
    text_embeddings: Sequence[np.ndarray], renormalize: bool = False
) -> ProbeWeights:
    """Average per-class prompt embeddings into prototype rows.

    Each entry of ``text_embeddings`` is a (J_c, D) array of unit-norm prompt
    embeddings for one class. The prototype is their plain mean. The mean of
    unit vectors is generally shorter than unit length; it is deliberately
    not re-normalized unless ``renormalize`` is set (kept as an ablation
    switch).

    Raises
    ------
    ValueError
        On an empty class list, an empty per-class array, inconsistent
        dimensions, or prompt rows that are not unit-norm.
    """
    if len(text_embeddings) == 0:
        raise ValueError("at least one class of prompt embeddings is required")
    rows = []
    dim = None
    for c, group in enumerate(text_embeddings):
        g = np.atleast_2d(np.asarray(group, dtype=np.float64))
        if g.shape[0] < 1:
            raise ValueError(f"class {c} has no prompt embeddings")
        if dim is None:
            dim = g.shape[1]
        elif g.shape[1] != dim:
            raise ValueError("prompt embeddings disagree on dimension")
        norms = np.linalg.norm(g, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_ATOL):
            raise ValueError(f"class {c} prompt embeddings are not unit-normalized")
        rows.append(g.mean(axis=0))
    matrix = np.stack(rows)
    if renormalize:
        matrix = normalize_rows(matrix)
    return ProbeWeights(matrix, normalized=renormalize)
