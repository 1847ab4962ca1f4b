"""Exact and entropy-regularized solvers for discrete optimal transport.

The exact solver is a successive-shortest-path min-cost-flow specialization
for dense transportation problems; the entropic solver is Sinkhorn scaling
with an automatic log-domain fallback for small regularization. Both are
pure functions of their inputs and safe to call concurrently on independent
problems; a single solve is single-threaded.
"""

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DiscreteMeasure",
    "TransportPlan",
    "SolverError",
    "ConvergenceWarning",
    "as_measure",
    "solve_exact",
    "solve_sinkhorn",
    "transport_cost",
    "marginal_violation",
    "brute_force_oracle",
]

MASS_ATOL = 1e-12
EXACT_SOLVER_CAP = 512
BRUTE_FORCE_CAP = 7
# log-domain updates are mandatory below this fraction of the largest cost
LOG_DOMAIN_FACTOR = 0.05


class SolverError(RuntimeError):
    """A transport solver could not produce a usable solution."""


class ConvergenceWarning(UserWarning):
    """An iterative solver stopped before reaching its tolerance."""


@dataclass(frozen=True)
class DiscreteMeasure:
    """Nonnegative weights over support points, summing to one."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError(f"weights must be a vector, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights contain non-finite values")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        total = float(w.sum())
        if total == 0.0:
            raise ValueError("degenerate measure: total mass is zero")
        if abs(total - 1.0) > MASS_ATOL:
            raise ValueError(f"weights must sum to 1 (got {total!r})")
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.shape[0]

    @classmethod
    def uniform(cls, n: int) -> "DiscreteMeasure":
        if n <= 0:
            raise ValueError("measure needs at least one support point")
        return cls(np.full(n, 1.0 / n))


def as_measure(m) -> DiscreteMeasure:
    """Coerce a weight vector or DiscreteMeasure to a DiscreteMeasure."""
    if isinstance(m, DiscreteMeasure):
        return m
    return DiscreteMeasure(np.asarray(m, dtype=np.float64))


@dataclass
class TransportPlan:
    """Coupling matrix with its prescribed marginals and solver diagnostics."""

    matrix: np.ndarray
    source: DiscreteMeasure
    target: DiscreteMeasure
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (len(self.source), len(self.target)):
            raise ValueError(
                f"plan shape {self.matrix.shape} does not match marginals "
                f"({len(self.source)}, {len(self.target)})"
            )

    @property
    def shape(self):
        return self.matrix.shape


def _as_cost(cost) -> np.ndarray:
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix contains non-finite entries")
    if np.any(C < 0):
        raise ValueError("cost matrix contains negative entries")
    return C


def _check_dims(C: np.ndarray, mu: DiscreteMeasure, nu: DiscreteMeasure):
    if C.shape != (len(mu), len(nu)):
        raise ValueError(
            f"cost shape {C.shape} does not match measures ({len(mu)}, {len(nu)})"
        )


def _strip_zero_mass(C, a, b):
    """Drop zero-weight support points, remembering the original indices."""
    keep_r = np.flatnonzero(a > 0)
    keep_c = np.flatnonzero(b > 0)
    return keep_r, keep_c, C[np.ix_(keep_r, keep_c)], a[keep_r], b[keep_c]


def _embed_plan(P, keep_r, keep_c, n, m):
    full = np.zeros((n, m))
    full[np.ix_(keep_r, keep_c)] = P
    return full


def transport_cost(plan, cost) -> float:
    """Total cost <C, gamma> = sum_ij gamma_ij * C_ij."""
    G = plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan, float)
    C = np.asarray(cost, dtype=np.float64)
    if G.shape != C.shape:
        raise ValueError(f"plan shape {G.shape} does not match cost shape {C.shape}")
    return float(np.sum(G * C))


def marginal_violation(plan: TransportPlan) -> float:
    """Infinity-norm deviation of the plan's row/column sums from its marginals."""
    r = np.abs(plan.matrix.sum(axis=1) - plan.source.weights)
    c = np.abs(plan.matrix.sum(axis=0) - plan.target.weights)
    return float(max(r.max(initial=0.0), c.max(initial=0.0)))


# ---------------------------------------------------------------------------
# exact solver: successive shortest paths with node potentials
# ---------------------------------------------------------------------------

def solve_exact(cost, mu, nu, max_size: int = EXACT_SOLVER_CAP) -> TransportPlan:
    """Solve the transportation LP exactly.

    Successive shortest augmenting paths on the bipartite residual graph,
    with Johnson potentials keeping reduced costs nonnegative. Suitable for
    small dense instances; raises when either side exceeds ``max_size``.

    Returns a feasible plan whose objective is the LP optimum. Ties among
    optimal plans are broken by the augmentation order, so only objective
    values should be compared across runs.
    """
    C = _as_cost(cost)
    mu, nu = as_measure(mu), as_measure(nu)
    _check_dims(C, mu, nu)
    n_full, m_full = C.shape
    if n_full > max_size or m_full > max_size:
        raise ValueError(
            f"instance {C.shape} exceeds the exact-solver cap ({max_size})"
        )
    keep_r, keep_c, Cr, a, b = _strip_zero_mass(C, mu.weights, nu.weights)
    P, iters = _ssp_transport(Cr, a.copy(), b.copy())
    full = _embed_plan(P, keep_r, keep_c, n_full, m_full)
    plan = TransportPlan(full, mu, nu, iterations=iters, converged=True)
    plan.residual = marginal_violation(plan)
    return plan


def _ssp_transport(C, a, b):
    """Min-cost transportation via successive shortest paths.

    ``a`` and ``b`` are consumed in place. Returns (plan, augmentations).
    """
    n, m = C.shape
    plan = np.zeros((n, m))
    pot_s = np.zeros(n)
    pot_t = np.zeros(m)
    remaining = float(min(a.sum(), b.sum()))
    aug_cap = 1000 + 40 * (n + m)
    iters = 0
    while remaining > 1e-12:
        if iters >= aug_cap:
            raise SolverError("exact solver exceeded its augmentation budget")
        found = _shortest_augmenting_path(C, plan, a, b, pot_s, pot_t)
        if found is None:
            if remaining > 1e-9:
                raise SolverError("no augmenting path despite remaining mass")
            break
        delta = _augment(plan, a, b, *found)
        remaining -= delta
        iters += 1
    return plan, iters


def _shortest_augmenting_path(C, plan, a, b, pot_s, pot_t):
    """Dijkstra on reduced costs from all supplied sources to a demand target.

    Updates the potentials in place on success and returns
    (target, parent_of_targets, parent_of_sources); returns None when no
    demand node is reachable.
    """
    n, m = C.shape
    dist_s = np.where(a > 0, 0.0, np.inf)
    dist_t = np.full(m, np.inf)
    par_t = np.full(m, -1, dtype=np.int64)  # source preceding target j
    par_s = np.full(n, -1, dtype=np.int64)  # target preceding source i
    vis_s = np.zeros(n, dtype=bool)
    vis_t = np.zeros(m, dtype=bool)
    while True:
        ds = np.where(vis_s, np.inf, dist_s)
        dt = np.where(vis_t, np.inf, dist_t)
        i = int(np.argmin(ds))
        j = int(np.argmin(dt))
        if ds[i] <= dt[j]:
            if not np.isfinite(ds[i]):
                return None
            vis_s[i] = True
            # forward arcs i -> all targets, reduced cost C_ij + p_i - q_j
            nd = ds[i] + C[i] + pot_s[i] - pot_t
            better = ~vis_t & (nd < dist_t)
            dist_t[better] = nd[better]
            par_t[better] = i
        else:
            if not np.isfinite(dt[j]):
                return None
            if b[j] > 0:
                d_star = dt[j]
                pot_s += np.minimum(dist_s, d_star)
                pot_t += np.minimum(dist_t, d_star)
                return j, par_t, par_s
            vis_t[j] = True
            # residual arcs j -> i exist only where plan mass is positive
            nd = dt[j] - C[:, j] + pot_t[j] - pot_s
            better = ~vis_s & (plan[:, j] > 0) & (nd < dist_s)
            dist_s[better] = nd[better]
            par_s[better] = j


def _augment(plan, a, b, j_star, par_t, par_s):
    """Push the bottleneck mass along the reconstructed path; returns it."""
    forward = []
    backward = []
    j = j_star
    while True:
        i = int(par_t[j])
        forward.append((i, j))
        j_prev = int(par_s[i])
        if j_prev < 0:
            origin = i
            break
        backward.append((i, j_prev))
        j = j_prev
    delta = min(a[origin], b[j_star])
    for i, j in backward:
        delta = min(delta, plan[i, j])
    for i, j in forward:
        plan[i, j] += delta
    for i, j in backward:
        plan[i, j] = max(plan[i, j] - delta, 0.0)
    a[origin] = max(a[origin] - delta, 0.0)
    b[j_star] = max(b[j_star] - delta, 0.0)
    return delta


# ---------------------------------------------------------------------------
# entropic solver
# ---------------------------------------------------------------------------

def solve_sinkhorn(
    cost,
    mu,
    nu,
    reg: float,
    max_iter: int = 10_000,
    tol: float = 1e-9,
) -> TransportPlan:
    """Entropy-regularized transport via Sinkhorn scaling.

    The returned plan has the form diag(u) * exp(-C/reg) * diag(v). Iteration
    stops when the worst marginal deviation falls below ``tol`` or after
    ``max_iter`` sweeps; the plan records iterations used, the final
    violation and a convergence flag, and a ConvergenceWarning is emitted on
    non-convergence. Log-domain updates are used whenever
    ``reg < 0.05 * max(C)`` or the plain scaling underflows.
    """
    C = _as_cost(cost)
    mu, nu = as_measure(mu), as_measure(nu)
    _check_dims(C, mu, nu)
    if reg <= 0:
        raise ValueError(f"reg must be positive, got {reg}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    n_full, m_full = C.shape
    keep_r, keep_c, Cr, a, b = _strip_zero_mass(C, mu.weights, nu.weights)

    use_log = reg < LOG_DOMAIN_FACTOR * float(Cr.max()) if Cr.size else False
    if use_log:
        P, iters, err = _sinkhorn_log(Cr, a, b, reg, max_iter, tol)
    else:
        out = _sinkhorn_scaling(Cr, a, b, reg, max_iter, tol)
        if out is None:
            warnings.warn(
                "scaling underflow in Sinkhorn; switching to log-domain updates",
                ConvergenceWarning,
                stacklevel=2,
            )
            P, iters, err = _sinkhorn_log(Cr, a, b, reg, max_iter, tol)
        else:
            P, iters, err = out

    converged = err <= tol
    if not converged:
        warnings.warn(
            f"Sinkhorn stopped after {iters} iterations with marginal "
            f"violation {err:.3e} > tol {tol:.3e}",
            ConvergenceWarning,
            stacklevel=2,
        )
    full = _embed_plan(P, keep_r, keep_c, n_full, m_full)
    return TransportPlan(
        full, mu, nu, iterations=iters, residual=float(err), converged=converged
    )


def _marginal_err(P, a, b):
    return max(
        float(np.abs(P.sum(axis=1) - a).max()),
        float(np.abs(P.sum(axis=0) - b).max()),
    )


def _sinkhorn_scaling(C, a, b, reg, max_iter, tol):
    """Plain matrix scaling; returns None when a scaling factor underflows."""
    K = np.exp(-C / reg)
    u = np.ones_like(a)
    v = np.ones_like(b)
    err = np.inf
    for it in range(1, max_iter + 1):
        Kv = K @ v
        if np.any(Kv == 0):
            return None
        u = a / Kv
        Ktu = K.T @ u
        if np.any(Ktu == 0):
            return None
        v = b / Ktu
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            return None
        if it % 10 == 0 or it == max_iter:
            P = u[:, None] * K * v[None, :]
            err = _marginal_err(P, a, b)
            if err <= tol:
                return P, it, err
    P = u[:, None] * K * v[None, :]
    return P, max_iter, _marginal_err(P, a, b)


def logsumexp(A: np.ndarray, axis: int) -> np.ndarray:
    """Stable log-sum-exp reduction along one axis."""
    M = np.max(A, axis=axis, keepdims=True)
    M = np.where(np.isfinite(M), M, 0.0)
    return np.squeeze(M, axis=axis) + np.log(
        np.sum(np.exp(A - M), axis=axis)
    )


def log_domain_scaling(
    log_kernel, log_a, log_b, max_iter, tol, check_every=10, g0=None
):
    """Scale exp(log_kernel) to the marginals (a, b) in the log domain.

    Returns the potentials (f, g) such that exp(log_kernel + f + g) has the
    requested marginals within ``tol``, plus iterations used and the final
    violation. ``g0`` warm-starts the column potential. This is the
    projection used by both the entropic solver and the coupled-plan solver.
    """
    n = log_a.shape[0]
    m = log_b.shape[0]
    f = np.zeros(n)
    g = np.zeros(m) if g0 is None else np.asarray(g0, dtype=np.float64).copy()
    a = np.exp(log_a)
    b = np.exp(log_b)
    err = np.inf
    for it in range(1, max_iter + 1):
        f = log_a - logsumexp(log_kernel + g[None, :], axis=1)
        g = log_b - logsumexp(log_kernel + f[:, None], axis=0)
        if it % check_every == 0 or it == max_iter:
            P = np.exp(log_kernel + f[:, None] + g[None, :])
            err = _marginal_err(P, a, b)
            if err <= tol:
                return f, g, it, err
    return f, g, max_iter, err


def _sinkhorn_log(C, a, b, reg, max_iter, tol):
    """Log-domain Sinkhorn with epsilon scaling.

    Anneals the regularization from max(C)/2 down to ``reg`` (halving each
    stage, warm-starting the potentials) before polishing at the target reg.
    Warm starts cut iteration counts from O(1/reg) to a handful per stage.
    """
    log_a, log_b = np.log(a), np.log(b)
    n, m = a.shape[0], b.shape[0]
    f = np.zeros(n)
    g = np.zeros(m)
    total_iters = 0
    cmax = float(C.max()) if C.size else 0.0
    stages = []
    eps = cmax / 2.0
    while eps > reg * 2.0:
        stages.append(eps)
        eps /= 2.0
    for eps in stages:
        budget = min(200, max_iter - total_iters)
        if budget <= 0:
            break
        log_kernel = (-C + f[:, None] + g[None, :]) / eps
        df, dg, it, _ = log_domain_scaling(
            log_kernel, log_a, log_b, max_iter=budget, tol=max(tol, 1e-6),
            check_every=5,
        )
        f += eps * df
        g += eps * dg
        total_iters += it
    log_kernel = (-C + f[:, None] + g[None, :]) / reg
    budget = max(max_iter - total_iters, 0)
    if budget > 0:
        df, dg, it, err = log_domain_scaling(
            log_kernel, log_a, log_b, max_iter=budget, tol=tol
        )
        total_iters += it
        log_kernel = log_kernel + df[:, None] + dg[None, :]
    P = np.exp(log_kernel)
    err = _marginal_err(P, a, b)
    return P, total_iters, err


# ---------------------------------------------------------------------------
# enumeration oracle
# ---------------------------------------------------------------------------

def brute_force_oracle(cost, n: int | None = None) -> float:
    """Exact optimum for square, uniform-marginal instances by enumeration.

    Scans all n! assignments; valid only for n <= 7. The optimal value of
    the uniform transportation problem equals the best assignment divided
    by n because the feasible polytope's vertices are scaled permutation
    matrices.
    """
    C = _as_cost(cost)
    rows, cols = C.shape
    if rows != cols:
        raise ValueError(f"oracle needs a square cost, got {C.shape}")
    if n is None:
        n = rows
    if n != rows:
        raise ValueError(f"n={n} does not match cost size {rows}")
    if n > BRUTE_FORCE_CAP:
        raise ValueError(f"n={n} exceeds the enumeration cap ({BRUTE_FORCE_CAP})")
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    costs = C[np.arange(n)[None, :], perms].sum(axis=1)
    return float(costs.min() / n)
