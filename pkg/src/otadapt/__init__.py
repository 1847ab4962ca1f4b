"""Optimal-transport domain adaptation toolkit.

Discrete OT solvers, cluster-aware transport costs, blockwise transport,
a small from-scratch embedding/classifier stack, and a collaborative
dual-plan adaptation trainer, all on numpy.
"""

from .ot_core import (
    ConvergenceWarning,
    DiscreteMeasure,
    SolverError,
    TransportPlan,
    as_measure,
    brute_force_oracle,
    marginal_violation,
    solve_exact,
    solve_sinkhorn,
    transport_cost,
)

__version__ = "0.1.0"
