"""Pairwise transport costs between labeled feature sets.

Four cost families: plain squared Euclidean, class-blocked with a large
sentinel, penalty-relaxed, and a smooth mix of feature distance with an
exponential label-affinity term that approximates distances along the
latent submanifold. Analytic gradients of the plan-weighted cost are
provided for both the feature and the soft-label route. All functions are
pure and order-independent over (i, j) pairs.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .ot_core import TransportPlan

__all__ = [
    "LabeledFeatureSet",
    "GeodesicCostParams",
    "CostOverflowWarning",
    "one_hot",
    "squared_euclidean_cost",
    "hard_class_cost",
    "penalized_cost",
    "geodesic_cost",
    "cost_gradient_wrt_features",
    "cost_gradient_wrt_soft_labels",
]

SOFT_LABEL_ATOL = 1e-9
EXP_CLAMP = 700.0
SENTINEL_FACTOR = 1e6


class CostOverflowWarning(UserWarning):
    """The label-affinity exponent was clamped to avoid overflow."""


@dataclass
class LabeledFeatureSet:
    """Feature matrix with optional hard labels and/or soft label rows."""

    features: np.ndarray
    hard_labels: np.ndarray | None = None
    soft_labels: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"features must be N x d, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite values")
        self.features = X
        if self.hard_labels is not None:
            y = np.asarray(self.hard_labels)
            if y.shape != (X.shape[0],):
                raise ValueError("hard_labels must have one entry per sample")
            if not np.issubdtype(y.dtype, np.integer):
                if not np.all(y == np.floor(y)):
                    raise ValueError("hard_labels must be integers")
                y = y.astype(np.int64)
            if np.any(y < 0):
                raise ValueError("hard_labels must be nonnegative class indices")
            self.hard_labels = y.astype(np.int64)
        if self.soft_labels is not None:
            S = np.asarray(self.soft_labels, dtype=np.float64)
            if S.ndim != 2 or S.shape[0] != X.shape[0]:
                raise ValueError("soft_labels must be N x K")
            if np.any(S < -SOFT_LABEL_ATOL) or np.any(S > 1 + SOFT_LABEL_ATOL):
                raise ValueError("soft_labels entries must lie in [0, 1]")
            if np.abs(S.sum(axis=1) - 1.0).max() > SOFT_LABEL_ATOL:
                raise ValueError("soft_labels rows must sum to 1")
            self.soft_labels = S
            if self.hard_labels is not None and self.hard_labels.max(initial=-1) >= S.shape[1]:
                raise ValueError("hard_labels exceed the soft-label class count")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass
class GeodesicCostParams:
    """Knobs of the label-aware cost family.

    alpha mixes feature distance against the label term, beta scales the
    label-affinity exponent, penalty_m is the additive cross-class penalty,
    and large_M is the finite stand-in for a forbidden pairing (None picks
    1e6 times the largest finite entry at build time).
    """

    alpha: float = 0.7
    beta: float = 1.0
    penalty_m: float = 1.0
    large_M: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.penalty_m < 0:
            raise ValueError(f"penalty_m must be nonnegative, got {self.penalty_m}")
        if self.large_M is not None and self.large_M <= 0:
            raise ValueError(f"large_M must be positive, got {self.large_M}")


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Encode integer labels as one-hot rows."""
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1:
        raise ValueError("labels must be a vector")
    if n_classes <= 0 or np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError(f"labels out of range for {n_classes} classes")
    out = np.zeros((y.shape[0], n_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def _pairwise_sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # ||a - b||^2 = ||a||^2 + ||b||^2 - 2 a.b, clipped against roundoff
    sq = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * (A @ B.T)
    )
    return np.maximum(sq, 0.0)


def label_info(fs: LabeledFeatureSet, n_classes: int | None = None) -> np.ndarray:
    """Soft labels when present, else one-hot hard labels."""
    if fs.soft_labels is not None:
        return fs.soft_labels
    if fs.hard_labels is None:
        raise ValueError("feature set carries no label information")
    if n_classes is None:
        n_classes = int(fs.hard_labels.max()) + 1
    return one_hot(fs.hard_labels, n_classes)


def squared_euclidean_cost(
    source: LabeledFeatureSet, target: LabeledFeatureSet
) -> np.ndarray:
    """C[i, j] = ||xs_i - xt_j||^2."""
    if source.dim != target.dim:
        raise ValueError(
            f"feature dims differ: {source.dim} vs {target.dim}"
        )
    return _pairwise_sq_dists(source.features, target.features)


def _require_hard_labels(source, target):
    if source.hard_labels is None or target.hard_labels is None:
        raise ValueError("both feature sets need hard labels for class costs")


def hard_class_cost(
    source: LabeledFeatureSet,
    target: LabeledFeatureSet,
    params: GeodesicCostParams,
) -> np.ndarray:
    """Squared Euclidean within matching classes, large_M sentinel otherwise.

    The sentinel keeps the matrix finite for LP/Sinkhorn arithmetic; it must
    dominate every achievable finite entry by a factor of 1e6.
    """
    _require_hard_labels(source, target)
    base = squared_euclidean_cost(source, target)
    same = source.hard_labels[:, None] == target.hard_labels[None, :]
    max_finite = float(base[same].max()) if same.any() else 0.0
    sentinel = params.large_M
    if sentinel is None:
        sentinel = SENTINEL_FACTOR * max(max_finite, 1.0)
    elif sentinel < SENTINEL_FACTOR * max_finite:
        raise ValueError(
            f"large_M={sentinel} is not >= {SENTINEL_FACTOR} x the largest "
            f"finite entry ({max_finite})"
        )
    return np.where(same, base, sentinel)


def penalized_cost(
    source: LabeledFeatureSet,
    target: LabeledFeatureSet,
    params: GeodesicCostParams,
) -> np.ndarray:
    """Squared Euclidean plus penalty_m on cross-class pairs."""
    _require_hard_labels(source, target)
    base = squared_euclidean_cost(source, target)
    same = source.hard_labels[:, None] == target.hard_labels[None, :]
    return base + np.where(same, 0.0, params.penalty_m)


def _label_exponent(ys, yt, beta):
    """Clamped exponent beta * ||ys_i - yt_j||^2 and its active-region mask."""
    arg = beta * _pairwise_sq_dists(ys, yt)
    clamped = arg > EXP_CLAMP
    if clamped.any():
        warnings.warn(
            "label-affinity exponent clamped at 700; cost values saturated",
            CostOverflowWarning,
            stacklevel=3,
        )
        arg = np.minimum(arg, EXP_CLAMP)
    return arg, ~clamped


def geodesic_cost(
    source: LabeledFeatureSet,
    target: LabeledFeatureSet,
    params: GeodesicCostParams,
    n_classes: int | None = None,
) -> np.ndarray:
    """Mix of feature distance and exponential label affinity.

    C[i, j] = alpha * ||xs_i - xt_j||^2
              + (1 - alpha) * exp(beta * ||ys_i - yt_j||^2)

    where the label rows are soft predictions when available and one-hot
    hard labels otherwise. Entries are bounded below by (1 - alpha) since
    exp is at least 1, and the map is continuous in features and soft
    labels.
    """
    base = squared_euclidean_cost(source, target)
    ys = label_info(source, n_classes)
    yt = label_info(target, n_classes)
    if ys.shape[1] != yt.shape[1]:
        raise ValueError(
            f"label widths differ: {ys.shape[1]} vs {yt.shape[1]}; "
            "pass n_classes to align one-hot encodings"
        )
    arg, _ = _label_exponent(ys, yt, params.beta)
    return params.alpha * base + (1.0 - params.alpha) * np.exp(arg)


def _plan_matrix(plan) -> np.ndarray:
    return plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan, float)


def cost_gradient_wrt_features(
    source: LabeledFeatureSet,
    target: LabeledFeatureSet,
    params: GeodesicCostParams,
    plan,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of <plan, C> in the feature coordinates, plan held fixed.

    d/dxs_i = sum_j plan_ij * 2 alpha (xs_i - xt_j), and the mirrored sign
    for the target side.
    """
    G = _plan_matrix(plan)
    Xs, Xt = source.features, target.features
    if G.shape != (Xs.shape[0], Xt.shape[0]):
        raise ValueError(
            f"plan shape {G.shape} does not match sets "
            f"({Xs.shape[0]}, {Xt.shape[0]})"
        )
    two_alpha = 2.0 * params.alpha
    row_mass = G.sum(axis=1)
    col_mass = G.sum(axis=0)
    grad_s = two_alpha * (row_mass[:, None] * Xs - G @ Xt)
    grad_t = two_alpha * (col_mass[:, None] * Xt - G.T @ Xs)
    return grad_s, grad_t


def cost_gradient_wrt_soft_labels(
    source: LabeledFeatureSet,
    target: LabeledFeatureSet,
    params: GeodesicCostParams,
    plan,
    n_classes: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of <plan, C> in the label coordinates, plan held fixed.

    d/dys_i = sum_j plan_ij (1 - alpha) beta exp(beta ||dy||^2) 2 (ys_i - yt_j).
    Entries whose exponent sits on the overflow clamp contribute zero slope.
    """
    G = _plan_matrix(plan)
    ys = label_info(source, n_classes)
    yt = label_info(target, n_classes)
    if G.shape != (ys.shape[0], yt.shape[0]):
        raise ValueError(
            f"plan shape {G.shape} does not match sets "
            f"({ys.shape[0]}, {yt.shape[0]})"
        )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CostOverflowWarning)
        arg, active = _label_exponent(ys, yt, params.beta)
    W = G * (1.0 - params.alpha) * params.beta * np.exp(arg) * active * 2.0
    grad_s = W.sum(axis=1)[:, None] * ys - W @ yt
    grad_t = W.sum(axis=0)[:, None] * yt - W.T @ ys
    return grad_s, grad_t
