"""Blockwise transport between same-class clusters.

Splits both domains by class label, solves one transport problem per class,
and sums the values. With matched per-class masses this equals plain
transport under the class-blocked sentinel cost, and the optimal plan is
block-diagonal once indices are sorted by class. Per-cluster solves are
independent; the reduction is ordered by class index for bit-stable sums.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .cost_geometry import (
    GeodesicCostParams,
    LabeledFeatureSet,
    penalized_cost,
    squared_euclidean_cost,
)
from .ot_core import DiscreteMeasure, TransportPlan, solve_exact, transport_cost

__all__ = [
    "ClusterPartition",
    "partition_by_label",
    "matched_masses",
    "pointwise_marginals",
    "ccot_distance",
    "assemble_block_plan",
]

MASS_MATCH_ATOL = 1e-12


@dataclass
class ClusterPartition:
    """Per-class row/column index lists with their empirical mass shares."""

    n_classes: int
    source_indices: list
    target_indices: list
    cluster_masses: list  # (source_share, target_share) per class
    empty_classes: list = field(default_factory=list)

    @property
    def n_source(self):
        return sum(len(ix) for ix in self.source_indices)

    @property
    def n_target(self):
        return sum(len(ix) for ix in self.target_indices)


def partition_by_label(
    source: LabeledFeatureSet, target: LabeledFeatureSet, n_classes: int
) -> ClusterPartition:
    """Group source rows and target columns by hard label."""
    if source.hard_labels is None or target.hard_labels is None:
        raise ValueError("both feature sets need hard labels to partition")
    for name, y in (("source", source.hard_labels), ("target", target.hard_labels)):
        if y.size and y.max() >= n_classes:
            raise ValueError(
                f"{name} label {int(y.max())} out of range for {n_classes} classes"
            )
    src_ix = [np.flatnonzero(source.hard_labels == k) for k in range(n_classes)]
    tgt_ix = [np.flatnonzero(target.hard_labels == k) for k in range(n_classes)]
    ns, nt = len(source), len(target)
    masses = [(len(s) / ns, len(t) / nt) for s, t in zip(src_ix, tgt_ix)]
    empty = [k for k in range(n_classes) if not len(src_ix[k]) and not len(tgt_ix[k])]
    return ClusterPartition(n_classes, src_ix, tgt_ix, masses, empty)


def matched_masses(partition: ClusterPartition) -> np.ndarray:
    """Per-class transport mass: the renormalized average of the two shares."""
    avg = np.array([(s + t) / 2.0 for s, t in partition.cluster_masses])
    total = avg.sum()
    if total <= 0:
        raise ValueError("partition carries no mass")
    return avg / total


def pointwise_marginals(partition: ClusterPartition) -> tuple[np.ndarray, np.ndarray]:
    """Per-point weights that spread each class mass uniformly in its cluster."""
    w = matched_masses(partition)
    mu = np.zeros(partition.n_source)
    nu = np.zeros(partition.n_target)
    for k in range(partition.n_classes):
        s_ix, t_ix = partition.source_indices[k], partition.target_indices[k]
        if len(s_ix):
            mu[s_ix] = w[k] / len(s_ix)
        if len(t_ix):
            nu[t_ix] = w[k] / len(t_ix)
    return mu, nu


def _one_sided(partition):
    return [
        k
        for k in range(partition.n_classes)
        if bool(len(partition.source_indices[k])) != bool(len(partition.target_indices[k]))
    ]


def ccot_distance(
    source: LabeledFeatureSet,
    target: LabeledFeatureSet,
    n_classes: int,
    mass_mode: str = "average",
    on_one_sided: str = "error",
    params: GeodesicCostParams | None = None,
) -> tuple[float, list[TransportPlan]]:
    """Sum of per-class transport values between same-class clusters.

    Each class solves an exact transport problem on its within-class
    squared-Euclidean cost with uniform-within-cluster marginals; the value
    is the class-mass-weighted sum. ``mass_mode='strict'`` refuses clusters
    whose source and target shares differ instead of averaging them.
    Classes present on one side only are an error unless
    ``on_one_sided='penalized'``, which transports that side's points
    against the whole opposite domain under the penalty-relaxed cost (the
    returned plan for such a class spans all opposite points and does not
    block-assemble).

    Returns the value and the list of per-class plans, each normalized to
    unit mass; block assembly applies the class masses.
    """
    partition = partition_by_label(source, target, n_classes)
    if mass_mode not in ("average", "strict"):
        raise ValueError(f"unknown mass_mode {mass_mode!r}")
    if on_one_sided not in ("error", "penalized"):
        raise ValueError(f"unknown on_one_sided {on_one_sided!r}")
    one_sided = _one_sided(partition)
    if one_sided and on_one_sided == "error":
        raise ValueError(
            f"classes {one_sided} are present on one side only; per-class "
            "masses cannot match"
        )
    if mass_mode == "strict":
        for k, (s, t) in enumerate(partition.cluster_masses):
            if abs(s - t) > MASS_MATCH_ATOL:
                raise ValueError(
                    f"class {k} mass mismatch: source {s} vs target {t}"
                )
    if one_sided:
        warnings.warn(
            f"classes {one_sided} matched against the whole opposite domain "
            "under the penalty-relaxed cost",
            stacklevel=2,
        )
    w = matched_masses(partition)
    total = 0.0
    plans: list[TransportPlan] = []
    for k in range(partition.n_classes):
        s_ix, t_ix = partition.source_indices[k], partition.target_indices[k]
        if not len(s_ix) and not len(t_ix):
            plans.append(None)
            continue
        if len(s_ix) and len(t_ix):
            sub_s = LabeledFeatureSet(source.features[s_ix])
            sub_t = LabeledFeatureSet(target.features[t_ix])
            C = squared_euclidean_cost(sub_s, sub_t)
            plan = solve_exact(
                C, DiscreteMeasure.uniform(len(s_ix)), DiscreteMeasure.uniform(len(t_ix))
            )
        else:
            plan, C = _one_sided_fallback(source, target, s_ix, t_ix, params)
        total += w[k] * transport_cost(plan, C)
        plans.append(plan)
    return float(total), plans


def _one_sided_fallback(source, target, s_ix, t_ix, params):
    params = params or GeodesicCostParams()
    if len(s_ix):
        sub_s = LabeledFeatureSet(
            source.features[s_ix], hard_labels=source.hard_labels[s_ix]
        )
        C = penalized_cost(sub_s, target, params)
        plan = solve_exact(
            C, DiscreteMeasure.uniform(len(s_ix)), DiscreteMeasure.uniform(len(target))
        )
    else:
        sub_t = LabeledFeatureSet(
            target.features[t_ix], hard_labels=target.hard_labels[t_ix]
        )
        C = penalized_cost(source, sub_t, params)
        plan = solve_exact(
            C, DiscreteMeasure.uniform(len(source)), DiscreteMeasure.uniform(len(t_ix))
        )
    return plan, C


def assemble_block_plan(
    partition: ClusterPartition, cluster_plans: list
) -> TransportPlan:
    """Embed per-class plans into the full matrix, zero outside the blocks.

    Cluster plans are unit-mass; each block is scaled by its matched class
    mass, so the assembled marginals are the concatenated cluster marginals.
    """
    w = matched_masses(partition)
    full = np.zeros((partition.n_source, partition.n_target))
    for k in range(partition.n_classes):
        plan = cluster_plans[k] if k < len(cluster_plans) else None
        s_ix, t_ix = partition.source_indices[k], partition.target_indices[k]
        if plan is None:
            if len(s_ix) or len(t_ix):
                raise ValueError(f"missing plan for nonempty class {k}")
            continue
        M = plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan, float)
        if M.shape != (len(s_ix), len(t_ix)):
            raise ValueError(
                f"class {k} plan shape {M.shape} does not match cluster sizes "
                f"({len(s_ix)}, {len(t_ix)})"
            )
        full[np.ix_(s_ix, t_ix)] = w[k] * M
    mu, nu = pointwise_marginals(partition)
    return TransportPlan(full, DiscreteMeasure(mu), DiscreteMeasure(nu))
