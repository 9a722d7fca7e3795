"""Few-shot linear probes over frozen embeddings.

Every probe produces a :class:`~probeset.core.ProbeWeights` matrix whose
rows play the role of class prototypes. Three trainable families live
here:

``sstext``
    Closed-form ridge solution anchored at the text prototypes. Under the
    adaptive penalty (1 / (n * tau), where n is the support size) the
    solution collapses to "text prototype plus the sum of that class's
    support embeddings", which also admits an O(C*D) incremental update
    when a single example is appended.

``simpleshot``
    Per-class centroid of the support embeddings.

``gdlp``
    Full-batch gradient descent with momentum on a softmax cross-entropy
    objective with an optional quadratic pull toward the text prototypes.
    With a zero penalty this is plain linear probing initialized at the
    text prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import ProbeWeights, check_temperature

LAMBDA_MODES = ("adaptive", "fixed")
GD_SCHEDULES = ("cosine", "constant")


class ProbeDivergenceError(RuntimeError):
    """Gradient descent produced a non-finite loss."""

    def __init__(self, epoch: int, detail: str = "loss is not finite"):
        super().__init__(f"gradient descent diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass(frozen=True)
class SupportSet:
    """Labeled embeddings a probe is fit on.

    ``features`` has shape (N, D) and ``labels`` shape (N,) with values in
    [0, C). The class count C is not stored here; probes take it from the
    text prototypes or an explicit argument.
    """

    features: np.ndarray
    labels: np.ndarray
    shots_per_class: int | None = None

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[1] < 1:
            raise ValueError("support features must form an (N, D) matrix")
        if labels.shape != (feats.shape[0],):
            raise ValueError("support labels must be one integer per feature row")
        if labels.min(initial=0) < 0:
            raise ValueError("support labels must be nonnegative")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def append(self, feature: np.ndarray, label: int) -> "SupportSet":
        """A new support set with one extra example at the end."""
        feature = np.asarray(feature, dtype=np.float64)
        return SupportSet(
            np.vstack([self.features, feature[None, :]]),
            np.concatenate([self.labels, [int(label)]]),
        )

    def permuted(self, order: np.ndarray) -> "SupportSet":
        """The same examples visited in a different order."""
        order = np.asarray(order)
        return SupportSet(self.features[order], self.labels[order], self.shots_per_class)


@dataclass(frozen=True)
class LambdaPolicy:
    """How the ridge penalty scales with the support size.

    ``adaptive`` uses 1 / (n * tau): the penalty weakens as shots
    accumulate, and it makes the closed-form solver below exact with
    coefficient one. ``fixed`` uses ``fixed_value / tau`` regardless of n.
    """

    mode: str = "adaptive"
    fixed_value: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in LAMBDA_MODES:
            raise ValueError(f"unknown lambda mode {self.mode!r}; expected one of {LAMBDA_MODES}")
        if self.fixed_value <= 0:
            raise ValueError("fixed_value must be positive")

    def resolve(self, n: int, tau: float) -> float:
        """The penalty weight for a support set of size ``n``."""
        tau = check_temperature(tau)
        if n < 1:
            raise ValueError("penalty undefined for an empty support set")
        if self.mode == "adaptive":
            return 1.0 / (n * tau)
        return self.fixed_value / tau

    def _solution_coefficient(self, n: int, tau: float) -> float:
        # The closed-form solution multiplies per-class feature sums by
        # 1 / (lambda * n * tau). Simplify per mode instead of composing
        # the three factors, so the adaptive case is exactly 1.0.
        check_temperature(tau)
        if self.mode == "adaptive":
            return 1.0
        return 1.0 / (self.fixed_value * n)


@dataclass(frozen=True)
class ClassSums:
    """Per-class feature sums, the sufficient statistic of ``sstext``."""

    sums: np.ndarray
    counts: np.ndarray

    def __post_init__(self) -> None:
        sums = np.asarray(self.sums, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if sums.ndim != 2 or counts.shape != (sums.shape[0],):
            raise ValueError("sums must be (C, D) with one count per class")
        if counts.min(initial=0) < 0:
            raise ValueError("counts must be nonnegative")
        object.__setattr__(self, "sums", sums)
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return self.sums.shape[0]

    @property
    def dim(self) -> int:
        return self.sums.shape[1]

    @property
    def num_samples(self) -> int:
        return int(self.counts.sum())


def _check_support_against(support: SupportSet, num_classes: int) -> None:
    if support.labels.max(initial=-1) >= num_classes:
        raise ValueError(
            f"support labels reach {int(support.labels.max())} but only "
            f"{num_classes} classes exist"
        )


def sstext_class_sums(support: SupportSet, num_classes: int | None = None) -> ClassSums:
    """Accumulate per-class sums of the support embeddings.

    ``num_classes`` defaults to one past the largest label present; pass it
    explicitly when some classes have no support examples (their sums are
    zero and their counts 0), including for an entirely empty support set.
    """
    if num_classes is None:
        num_classes = int(support.labels.max(initial=-1)) + 1
    num_classes = int(num_classes)
    if num_classes < 0 or (num_classes == 0 and support.num_samples > 0):
        raise ValueError("num_classes must cover every label present")
    _check_support_against(support, num_classes)
    sums = np.zeros((num_classes, support.dim))
    np.add.at(sums, support.labels, support.features)
    counts = np.bincount(support.labels, minlength=num_classes).astype(np.int64)
    return ClassSums(sums, counts)


def _sstext_from_sums(
    sums: ClassSums, text_weights: ProbeWeights, tau: float, policy: LambdaPolicy
) -> ProbeWeights:
    if sums.num_classes != text_weights.num_classes or sums.dim != text_weights.dim:
        raise ValueError("class sums and text prototypes disagree on shape")
    n = sums.num_samples
    if n < 1:
        raise ValueError("support set must contain at least one example")
    coef = policy._solution_coefficient(n, tau)
    return ProbeWeights(coef * sums.sums + text_weights.matrix)


def sstext_fit(
    support: SupportSet,
    text_weights: ProbeWeights,
    tau: float,
    policy: LambdaPolicy = LambdaPolicy(),
) -> ProbeWeights:
    """Closed-form probe: text prototypes plus scaled class feature sums.

    Minimizes the linearized objective (true-class logit term plus ridge
    pull toward the text prototypes); the minimizer of that surrogate is
    ``w_c = t_c + sums_c / (lambda * n * tau)``.
    """
    if support.dim != text_weights.dim:
        raise ValueError("support features and text prototypes disagree on dim")
    sums = sstext_class_sums(support, text_weights.num_classes)
    return _sstext_from_sums(sums, text_weights, tau, policy)


def sstext_fit_incremental(
    base: ClassSums,
    text_weights: ProbeWeights,
    tau: float,
    test_feature: np.ndarray,
    candidate_label: int,
    policy: LambdaPolicy = LambdaPolicy(),
) -> ProbeWeights:
    """Solution after appending one example, without refitting from scratch.

    Equivalent to :func:`sstext_fit` on the augmented support set (the
    penalty re-resolves against n+1); costs O(C*D) with no pass over the
    base support. The base may be empty (n=0), covering transduction from
    a purely zero-shot starting point.
    """
    feature = np.asarray(test_feature, dtype=np.float64)
    label = int(candidate_label)
    if base.num_classes != text_weights.num_classes or base.dim != text_weights.dim:
        raise ValueError("class sums and text prototypes disagree on shape")
    if not 0 <= label < base.num_classes:
        raise ValueError(f"label {label} out of range for {base.num_classes} classes")
    if feature.shape != (base.dim,):
        raise ValueError("appended feature has the wrong dimension")
    n = base.num_samples + 1
    coef = policy._solution_coefficient(n, tau)
    matrix = coef * base.sums + text_weights.matrix
    # Group the sum before scaling so the result is bit-identical to the
    # batch fit, which scales the already-accumulated row.
    matrix[label] = coef * (base.sums[label] + feature) + text_weights.matrix[label]
    return ProbeWeights(matrix)


def simpleshot_fit(support: SupportSet, num_classes: int | None = None) -> ProbeWeights:
    """Per-class centroids of the support embeddings."""
    if num_classes is None:
        num_classes = int(support.labels.max()) + 1
    sums = sstext_class_sums(support, num_classes)
    missing = np.flatnonzero(sums.counts == 0)
    if missing.size:
        raise ValueError(
            "centroid probe undefined for classes with no support examples: "
            + ", ".join(map(str, missing.tolist()))
        )
    return ProbeWeights(sums.sums / sums.counts[:, None])


@dataclass(frozen=True)
class GdConfig:
    """Hyperparameters of the gradient-descent probe.

    Defaults follow the standard few-shot linear-probing recipe: 300
    full-batch epochs, momentum 0.9, learning rate 0.1 under cosine decay,
    and no pull toward the prototypes (``lam=0``).
    """

    epochs: int = 300
    momentum: float = 0.9
    initial_lr: float = 0.1
    schedule: str = "cosine"
    lam: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.schedule not in GD_SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; expected one of {GD_SCHEDULES}")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.initial_lr
        return self.initial_lr * 0.5 * (1.0 + np.cos(np.pi * epoch / self.epochs))


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def gd_lp_fit(
    support: SupportSet,
    text_weights: ProbeWeights,
    tau: float,
    config: GdConfig = GdConfig(),
) -> ProbeWeights:
    """Fit a linear probe by full-batch gradient descent with momentum.

    The objective is mean softmax cross-entropy at temperature ``tau``
    plus ``(lam / 2) * ||W - T||^2`` where T holds the text prototypes,
    which also serve as the initial iterate.

    Raises
    ------
    ProbeDivergenceError
        If the loss stops being finite, reporting the epoch at which that
        was detected.
    """
    tau = check_temperature(tau)
    if support.dim != text_weights.dim:
        raise ValueError("support features and text prototypes disagree on dim")
    _check_support_against(support, text_weights.num_classes)
    v = support.features
    n = support.num_samples
    t_mat = text_weights.matrix
    y_onehot = _one_hot(support.labels, text_weights.num_classes)
    w = t_mat.copy()
    velocity = np.zeros_like(w)
    idx = np.arange(n)
    for epoch in range(config.epochs):
        logits = v @ w.T / tau
        lse = logsumexp(logits, axis=1)
        loss = float(np.mean(lse - logits[idx, support.labels]))
        loss += 0.5 * config.lam * float(np.sum((w - t_mat) ** 2))
        if not np.isfinite(loss):
            raise ProbeDivergenceError(epoch)
        probs = np.exp(logits - lse[:, None])
        grad = (probs - y_onehot).T @ v / (n * tau) + config.lam * (w - t_mat)
        velocity = config.momentum * velocity + grad
        w = w - config.lr_at(epoch) * velocity
    if not np.isfinite(w).all():
        raise ProbeDivergenceError(config.epochs, "weights are not finite after the final step")
    return ProbeWeights(w)


@dataclass(frozen=True)
class LossTerms:
    """The probe objective split into its concave and convex parts.

    ``linear`` collects the terms affine in W (negative mean true-class
    logit plus the ridge penalty); ``logsumexp`` is the mean log-partition
    term. Their sum is the full objective. ``linear_grad`` is the exact
    gradient of the linear part; ``full_grad`` is the gradient of the
    total.
    """

    linear: float
    logsumexp: float
    linear_grad: np.ndarray = field(repr=False)
    full_grad: np.ndarray = field(repr=False)

    @property
    def total(self) -> float:
        return self.linear + self.logsumexp


def loss_terms(
    weights: ProbeWeights,
    support: SupportSet,
    text_weights: ProbeWeights,
    tau: float,
    lam: float,
) -> LossTerms:
    """Evaluate the probe objective and both analytic gradients at W."""
    tau = check_temperature(tau)
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if weights.matrix.shape != text_weights.matrix.shape:
        raise ValueError("weights and text prototypes disagree on shape")
    _check_support_against(support, weights.num_classes)
    v = support.features
    n = support.num_samples
    w = weights.matrix
    t_mat = text_weights.matrix
    logits = v @ w.T / tau
    idx = np.arange(n)
    diff = w - t_mat
    linear = -float(np.mean(logits[idx, support.labels])) + 0.5 * lam * float(np.sum(diff**2))
    lse_term = float(np.mean(logsumexp(logits, axis=1)))
    y_onehot = _one_hot(support.labels, weights.num_classes)
    linear_grad = -(y_onehot.T @ v) / (n * tau) + lam * diff
    probs = np.exp(logits - logsumexp(logits, axis=1)[:, None])
    full_grad = (probs - y_onehot).T @ v / (n * tau) + lam * diff
    return LossTerms(linear, lse_term, linear_grad, full_grad)
