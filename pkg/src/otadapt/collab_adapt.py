"""Collaborative dual-plan transport objective and the adaptation trainer.

Two transport plans are built from two label streams (trained classifier
vs. true source labels plus k-NN target labels) and coupled by a divergence
penalty. The coupled plan problem is solved by block-coordinate descent:
the first plan's block is an entropic transport solve against a shifted
cost, the second plan's block is entropic mirror descent projected onto the
marginal polytope by Sinkhorn scaling. Training alternates plan solves with
gradient steps on the embedding and classifier while the plans are held
fixed; gradients flow through the cost matrices (features and soft labels),
the cross-entropy term, and the target-entropy term.

One training run is a single logical sequence; independent runs are fully
concurrent.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .cost_geometry import (
    GeodesicCostParams,
    LabeledFeatureSet,
    cost_gradient_wrt_features,
    cost_gradient_wrt_soft_labels,
    geodesic_cost,
    one_hot,
)
from .models import (
    LinearClassifier,
    MemoryBank,
    MlpEmbedding,
    SgdConfig,
    UpstreamGrads,
    backward_and_step,
    bank_update,
    classify,
    cross_entropy,
    embed_forward,
    knn_predict,
)
from .ot_core import (
    ConvergenceWarning,
    DiscreteMeasure,
    TransportPlan,
    as_measure,
    log_domain_scaling,
    marginal_violation,
    solve_sinkhorn,
    transport_cost,
)

__all__ = [
    "CollabConfig",
    "DualPlans",
    "BatchState",
    "AdaptModel",
    "DivergenceError",
    "target_entropy",
    "kl_plans",
    "solve_collaborative",
    "total_loss",
    "train_adaptation",
    "evaluate",
]

PLAN_FLOOR = 1e-30


class DivergenceError(RuntimeError):
    """Training loss blew up and the run was aborted."""


@dataclass(frozen=True)
class CollabConfig:
    """Hyperparameters of the collaborative objective and trainer.

    ``alpha_cost`` mixes the cost matrices, ``alpha_plan`` mixes the two
    plan objectives; they are independent knobs. ``lambda1/2/3`` weight the
    transport, target-entropy, and plan-divergence terms of the total loss.
    """

    alpha_cost: float = 0.7
    beta: float = 1.0
    alpha_plan: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.1
    sinkhorn_reg: float = 0.1
    k_neighbors: int = 5
    epochs: int = 30
    seed: int = 0
    sgd: SgdConfig = field(default_factory=SgdConfig)
    hidden_sizes: tuple = (128, 64)
    bank_momentum: float = 0.5
    n_classes: int | None = None
    true_kl: bool = False
    bcd_max_iter: int = 100
    bcd_tol: float = 1e-8
    dual_max_iter: int = 400
    projection_tol: float = 1e-10
    sinkhorn_max_iter: int = 5000

    def __post_init__(self):
        if not 0.0 <= self.alpha_cost <= 1.0:
            raise ValueError("alpha_cost must be in [0, 1]")
        if not 0.0 <= self.alpha_plan <= 1.0:
            raise ValueError("alpha_plan must be in [0, 1]")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.sinkhorn_reg <= 0:
            raise ValueError("sinkhorn_reg must be positive")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")

    @property
    def cost_params(self) -> GeodesicCostParams:
        return GeodesicCostParams(alpha=self.alpha_cost, beta=self.beta)


@dataclass
class DualPlans:
    """The two coupled plans plus block-descent diagnostics."""

    plan1: TransportPlan
    plan2: TransportPlan
    iterations: int = 0
    converged: bool = True
    change: float = 0.0

    @property
    def disagreement(self) -> float:
        return float(np.linalg.norm(self.plan1.matrix - self.plan2.matrix))


def target_entropy(soft_labels: np.ndarray) -> float:
    """Mean Shannon entropy of prediction rows, with 0 log 0 = 0."""
    P = np.asarray(soft_labels, dtype=np.float64)
    if P.ndim != 2:
        raise ValueError("soft labels must be a matrix")
    if np.any(P < 0) or np.abs(P.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("rows must be probability vectors")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * np.log(P), 0.0)
    return float(-terms.sum() / P.shape[0])


def _plan_matrix(p):
    return p.matrix if isinstance(p, TransportPlan) else np.asarray(p, float)


def kl_plans(plan_a, plan_b, true_kl: bool = False) -> float:
    """Plan divergence -sum_ij A_ij log B_ij, with B floored at 1e-30.

    This is a cross-entropy: it does not vanish at A == B. Pass
    ``true_kl=True`` to subtract A's own entropy and obtain the proper
    Kullback-Leibler divergence instead.
    """
    A = _plan_matrix(plan_a)
    B = _plan_matrix(plan_b)
    if A.shape != B.shape:
        raise ValueError(f"plan shapes differ: {A.shape} vs {B.shape}")
    value = float(-np.sum(A * np.log(np.clip(B, PLAN_FLOOR, None))))
    if true_kl:
        value -= float(-np.sum(A * np.log(np.clip(A, PLAN_FLOOR, None))))
    return value


# ---------------------------------------------------------------------------
# coupled plan solver
# ---------------------------------------------------------------------------

def solve_collaborative(cost1, cost2, mu, nu, cfg: CollabConfig) -> DualPlans:
    """Block-coordinate descent on the coupled dual-plan objective.

    Minimizes

        a <g1, C1> + (1 - a) <g2, C2> + lambda3 * sum g1 log(g1/g2)
        + reg * (a * sum g1 log g1 + (1 - a) * sum g2 log g2)

    over two couplings with common marginals, where a = alpha_plan and
    reg = sinkhorn_reg. The objective is jointly convex, so the alternation
    reaches the global optimum. The g1 block is an entropic transport solve
    with the divergence-shifted cost (a C1 - lambda3 log g2) scaled by
    1 / (a + lambda3/reg); the g2 block minimizes its linear term plus the
    -lambda3 sum g1 log g2 coupling with a generalized Sinkhorn: per-entry
    stationarity is solved by vectorized Newton and the marginal potentials
    by per-row/column Newton steps. Iteration stops when both plans move
    less than ``bcd_tol`` (Frobenius) or at ``bcd_max_iter``, warning with
    the residual change on non-convergence.

    With lambda3 = 0 this reduces exactly to two independent entropic
    solves; with identical costs the optimum has g1 == g2.
    """
    C1 = np.asarray(cost1, dtype=np.float64)
    C2 = np.asarray(cost2, dtype=np.float64)
    if C1.shape != C2.shape:
        raise ValueError(f"cost shapes differ: {C1.shape} vs {C2.shape}")
    mu, nu = as_measure(mu), as_measure(nu)
    if C1.shape != (len(mu), len(nu)):
        raise ValueError("cost shape does not match the marginals")
    a = cfg.alpha_plan
    lam3 = cfg.lambda3
    reg = cfg.sinkhorn_reg

    if lam3 == 0.0:
        p1 = solve_sinkhorn(C1, mu, nu, reg, cfg.sinkhorn_max_iter, cfg.projection_tol)
        p2 = solve_sinkhorn(C2, mu, nu, reg, cfg.sinkhorn_max_iter, cfg.projection_tol)
        return DualPlans(p1, p2, iterations=0, converged=p1.converged and p2.converged)

    w_a, w_b = mu.weights, nu.weights
    log_a, log_b = np.log(w_a), np.log(w_b)
    gamma2 = np.outer(w_a, w_b)
    gamma1 = gamma2.copy()
    g1_pot = None
    f2 = np.zeros(len(mu))
    g2 = np.zeros(len(nu))
    change = np.inf
    converged = False
    prev_delta = None
    prev_change = np.inf
    it = 0
    for it in range(1, cfg.bcd_max_iter + 1):
        # inexact inner solves far from convergence, tight ones near it
        inner_tol = min(max(0.02 * change, cfg.projection_tol), 1e-4)
        prev1, prev2 = gamma1, gamma2
        gamma1, g1_pot = _plan1_block(
            C1, gamma2, a, lam3, reg, log_a, log_b, cfg, g1_pot, inner_tol
        )
        if a == 1.0:
            gamma2 = gamma1.copy()
        else:
            gamma2, f2, g2 = _plan2_block(
                C2, gamma1, a, lam3, reg, w_a, w_b, cfg, f2, g2, inner_tol
            )
        prev_change, change = change, max(
            float(np.linalg.norm(gamma1 - prev1)),
            float(np.linalg.norm(gamma2 - prev2)),
        )
        if change <= cfg.bcd_tol:
            converged = True
            break
        # strong coupling makes plain alternation contract slowly; when the
        # iterates decay geometrically, extrapolate the second plan in log
        # space (the next block reads it only through log gamma2, so the
        # extrapolated point needs no feasibility)
        delta = np.log(np.clip(gamma2, PLAN_FLOOR, None)) - np.log(
            np.clip(prev2, PLAN_FLOOR, None)
        )
        if prev_delta is not None and change <= prev_change:
            denom = float(np.sum(prev_delta * prev_delta))
            rho = float(np.sum(delta * prev_delta)) / denom if denom > 0 else 0.0
            if 0.5 < rho < 0.995:
                boost = min(rho / (1.0 - rho), 200.0)
                gamma2 = np.exp(
                    np.log(np.clip(gamma2, PLAN_FLOOR, None)) + boost * delta
                )
                prev_delta = None
                continue
        prev_delta = delta
    if not converged:
        warnings.warn(
            f"coupled plan solve stopped at iteration {it} with plan change "
            f"{change:.3e} > {cfg.bcd_tol:.3e}",
            ConvergenceWarning,
            stacklevel=2,
        )
    p1 = TransportPlan(gamma1, mu, nu, iterations=it, converged=converged)
    p1.residual = marginal_violation(p1)
    p2 = TransportPlan(gamma2, mu, nu, iterations=it, converged=converged)
    p2.residual = marginal_violation(p2)
    return DualPlans(p1, p2, iterations=it, converged=converged, change=float(change))


def _plan1_block(C1, gamma2, a, lam3, reg, log_a, log_b, cfg, g0, tol):
    """Entropic solve with the divergence-shifted cost, warm-started."""
    log_g2 = np.log(np.clip(gamma2, PLAN_FLOOR, None))
    eff_cost = (a * C1 - lam3 * log_g2) / (a + lam3 / reg)
    log_kernel = -eff_cost / reg
    f, g, _, _ = log_domain_scaling(
        log_kernel, log_a, log_b,
        max_iter=cfg.sinkhorn_max_iter, tol=tol,
        check_every=5, g0=g0,
    )
    return np.exp(log_kernel + f[:, None] + g[None, :]), g


def _entry_h(u, s, q, reg):
    return reg * u - q * np.exp(np.minimum(-u, 700.0)) - s


def _entry_log_roots(s, q, reg, iters=60):
    """Vectorized root of reg*u - q*exp(-u) = s in u (u = log gamma).

    The left side is strictly increasing in u, with h(s/reg) <= 0 and
    h(max((s + q)/reg + 1, 1)) > 0, so [lo, hi] always brackets the root.
    Safeguarded Newton: steps leaving the bracket fall back to bisection.
    """
    lo = s / reg
    hi = np.maximum((s + q) / reg + 1.0, 1.0)
    u = np.where(q > 0, 0.5 * (lo + hi), lo)
    for _ in range(iters):
        e = np.exp(np.minimum(-u, 700.0))
        h = reg * u - q * e - s
        lo = np.where(h <= 0, u, lo)
        hi = np.where(h > 0, u, hi)
        step = h / (reg + q * e)
        cand = u - step
        mid = 0.5 * (lo + hi)
        u = np.where((cand > lo) & (cand < hi), cand, mid)
        if float(np.abs(h).max()) <= 1e-13 * max(1.0, float(np.abs(s).max())):
            break
    return u


def _plan2_block(C2, gamma1, a, lam3, reg, w_a, w_b, cfg, f, g, tol):
    """Generalized Sinkhorn for the second plan's block.

    Stationarity of the block objective reads, entrywise,
    reg*log(g2) - kappa*g1/g2 = f + g - C2 - reg with kappa =
    lambda3/(1 - alpha_plan); the potentials (f, g) enforce the marginals.
    Rows and columns are monotone in their potentials, so each sweep takes
    one vectorized Newton step per side. Warm-started across outer calls.
    """
    kappa = lam3 / (1.0 - a)
    q = kappa * gamma1
    f = f.copy()
    g = g.copy()
    gamma = None
    for sweep in range(1, cfg.dual_max_iter + 1):
        s = f[:, None] + g[None, :] - C2 - reg
        gamma = np.exp(_entry_log_roots(s, q, reg))
        rows = gamma.sum(axis=1)
        slope = (gamma * gamma / (reg * gamma + q)).sum(axis=1)
        f += np.clip((w_a - rows) / np.maximum(slope, PLAN_FLOOR), -20.0, 20.0)

        s = f[:, None] + g[None, :] - C2 - reg
        gamma = np.exp(_entry_log_roots(s, q, reg))
        cols = gamma.sum(axis=0)
        slope = (gamma * gamma / (reg * gamma + q)).sum(axis=0)
        g += np.clip((w_b - cols) / np.maximum(slope, PLAN_FLOOR), -20.0, 20.0)

        err = max(
            float(np.abs(gamma.sum(axis=1) - w_a).max()),
            float(np.abs(gamma.sum(axis=0) - w_b).max()),
        )
        if err <= tol:
            break
    return gamma, f, g


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------

@dataclass
class BatchState:
    """Everything the loss needs from one forward pass and plan solve."""

    source_soft: np.ndarray
    source_labels: np.ndarray
    target_soft: np.ndarray
    cost1: np.ndarray
    cost2: np.ndarray
    plans: DualPlans
    cfg: CollabConfig


def total_loss(state: BatchState) -> tuple[float, dict]:
    """Assemble the training objective and report each component.

    total = CE + lambda1 * (a <g1,C1> + (1-a) <g2,C2>)
          + lambda2 * H(target predictions) + lambda3 * KL(g1 || g2)
    """
    cfg = state.cfg
    ce, _ = cross_entropy(state.source_soft, state.source_labels)
    ot1 = transport_cost(state.plans.plan1, state.cost1)
    ot2 = transport_cost(state.plans.plan2, state.cost2)
    ot = cfg.alpha_plan * ot1 + (1.0 - cfg.alpha_plan) * ot2
    ent = target_entropy(state.target_soft)
    kl = kl_plans(state.plans.plan1, state.plans.plan2, true_kl=cfg.true_kl)
    total = ce + cfg.lambda1 * ot + cfg.lambda2 * ent + cfg.lambda3 * kl
    components = {"ce": ce, "ot": ot, "entropy": ent, "kl": kl, "total": total}
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite loss component: {components}")
    return total, components


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

@dataclass
class AdaptModel:
    """Embedding, classifier, and memory bank trained together."""

    embedding: MlpEmbedding
    classifier: LinearClassifier
    bank: MemoryBank
    n_classes: int


def _softmax_vjp(P, dP):
    # J_softmax^T applied to dP, rowwise
    inner = np.sum(dP * P, axis=1, keepdims=True)
    return P * (dP - inner)


def batch_gradients(model, clf, tape, batch, cfg: CollabConfig):
    """Per-component upstream gradients for one concatenated batch.

    ``batch`` is a dict with the split sizes, labels, soft predictions,
    costs, and solved plans. Returns UpstreamGrads for the combined loss
    plus the component dictionary from total_loss. The plans and the k-NN
    labels are treated as constants.
    """
    bs = batch["n_source"]
    Ps, Pt = batch["source_soft"], batch["target_soft"]
    nt = Pt.shape[0]
    k = Ps.shape[1]
    plans = batch["plans"]
    params = cfg.cost_params

    d_latent = np.zeros_like(tape.activations[-1])
    d_logits = np.zeros((bs + nt, k))

    # supervised route
    _, g_ce = cross_entropy(Ps, batch["source_labels"])
    d_logits[:bs] += g_ce

    if cfg.lambda1 > 0:
        w1 = cfg.lambda1 * cfg.alpha_plan
        w2 = cfg.lambda1 * (1.0 - cfg.alpha_plan)
        if w1 > 0:
            gs, gt = cost_gradient_wrt_features(
                batch["stream1_source"], batch["stream1_target"], params, plans.plan1
            )
            d_latent[:bs] += w1 * gs
            d_latent[bs:] += w1 * gt
            ls, lt = cost_gradient_wrt_soft_labels(
                batch["stream1_source"], batch["stream1_target"], params, plans.plan1
            )
            d_logits[:bs] += _softmax_vjp(Ps, w1 * ls)
            d_logits[bs:] += _softmax_vjp(Pt, w1 * lt)
        if w2 > 0:
            gs, gt = cost_gradient_wrt_features(
                batch["stream2_source"], batch["stream2_target"], params, plans.plan2
            )
            d_latent[:bs] += w2 * gs
            d_latent[bs:] += w2 * gt
            # stream 2 labels are one-hot constants: no label route

    if cfg.lambda2 > 0:
        dH = (-np.log(np.clip(Pt, 1e-12, None)) - 1.0) / nt
        d_logits[bs:] += _softmax_vjp(Pt, cfg.lambda2 * dH)

    # the plan-divergence term depends only on the fixed plans: no gradient
    return UpstreamGrads(d_latent, d_logits)


def _iter_batches(rng, n_source, n_target, batch_size):
    perm_s = rng.permutation(n_source)
    perm_t = rng.permutation(n_target)
    n_batches = max(1, int(np.ceil(n_source / batch_size)))
    for b in range(n_batches):
        s_ix = perm_s[b * batch_size : (b + 1) * batch_size]
        t_start = (b * batch_size) % n_target
        t_ix = np.take(perm_t, np.arange(t_start, t_start + len(s_ix)), mode="wrap")
        yield s_ix, t_ix


def train_adaptation(
    source: LabeledFeatureSet,
    target: LabeledFeatureSet,
    cfg: CollabConfig,
    eval_target: LabeledFeatureSet | None = None,
) -> tuple[AdaptModel, list]:
    """Run the collaborative adaptation loop.

    Per batch: forward source and target through the embedding, build the
    classifier-stream cost from soft predictions on both domains and the
    label-stream cost from true source labels plus bank-based k-NN target
    labels, solve the coupled plans, then take one SGD step with the plans
    held fixed and refresh the bank entries of the source samples seen.
    Target labels are never read from ``target``; pass ``eval_target`` to
    track held-out accuracy in the metrics only.

    Returns the trained model and one metrics record per epoch. Raises
    DivergenceError when the epoch loss exceeds 10x the initial loss for
    three consecutive epochs.
    """
    if source.hard_labels is None:
        raise ValueError("source set needs hard labels")
    if source.dim != target.dim:
        raise ValueError("source and target feature dims differ")
    n_classes = cfg.n_classes or int(source.hard_labels.max()) + 1
    rng = np.random.default_rng(cfg.seed)
    model = MlpEmbedding([source.dim, *cfg.hidden_sizes], seed=cfg.seed)
    clf = LinearClassifier(model.latent_dim, n_classes, seed=cfg.seed + 1)
    bank_latents, _ = embed_forward(model, source.features)
    bank = MemoryBank(bank_latents.copy(), momentum=cfg.bank_momentum)
    adapt = AdaptModel(model, clf, bank, n_classes)

    opt_state = None
    history = []
    initial_loss = None
    bad_streak = 0
    source_onehot_cache = one_hot(source.hard_labels, n_classes)

    for epoch in range(cfg.epochs):
        sums = {"ce": 0.0, "ot": 0.0, "entropy": 0.0, "kl": 0.0, "total": 0.0}
        worst_violation = 0.0
        disagreement = 0.0
        n_batches = 0
        for s_ix, t_ix in _iter_batches(rng, len(source), len(target), cfg.sgd.batch_size):
            Xb = np.concatenate([source.features[s_ix], target.features[t_ix]])
            latent, tape = embed_forward(model, Xb)
            bs = len(s_ix)
            Zs, Zt = latent[:bs], latent[bs:]
            Ps = classify(clf, Zs)
            Pt = classify(clf, Zt)
            y_knn = knn_predict(bank, source.hard_labels, Zt, cfg.k_neighbors)

            stream1_s = LabeledFeatureSet(Zs, soft_labels=Ps)
            stream1_t = LabeledFeatureSet(Zt, soft_labels=Pt)
            stream2_s = LabeledFeatureSet(Zs, soft_labels=source_onehot_cache[s_ix])
            stream2_t = LabeledFeatureSet(Zt, soft_labels=one_hot(y_knn, n_classes))
            C1 = geodesic_cost(stream1_s, stream1_t, cfg.cost_params)
            C2 = geodesic_cost(stream2_s, stream2_t, cfg.cost_params)
            plans = solve_collaborative(
                C1, C2,
                DiscreteMeasure.uniform(bs), DiscreteMeasure.uniform(len(t_ix)),
                cfg,
            )
            state = BatchState(
                Ps, source.hard_labels[s_ix], Pt, C1, C2, plans, cfg
            )
            _, comps = total_loss(state)
            batch = {
                "n_source": bs,
                "source_labels": source.hard_labels[s_ix],
                "source_soft": Ps,
                "target_soft": Pt,
                "stream1_source": stream1_s,
                "stream1_target": stream1_t,
                "stream2_source": stream2_s,
                "stream2_target": stream2_t,
                "plans": plans,
            }
            upstream = batch_gradients(model, clf, tape, batch, cfg)
            opt_state = backward_and_step(model, clf, tape, upstream, cfg.sgd, opt_state)
            bank_update(bank, s_ix, Zs, cfg.bank_momentum)

            for key in sums:
                sums[key] += comps[key]
            worst_violation = max(
                worst_violation, plans.plan1.residual, plans.plan2.residual
            )
            disagreement += plans.disagreement
            n_batches += 1

        record = {
            "epoch": epoch,
            "ce": sums["ce"] / n_batches,
            "ot": sums["ot"] / n_batches,
            "entropy": sums["entropy"] / n_batches,
            "kl": sums["kl"] / n_batches,
            "target_acc": None,
            "marginal_violation": worst_violation,
            "plan_disagreement": disagreement / n_batches,
        }
        if eval_target is not None:
            record["target_acc"], _ = evaluate(adapt, eval_target)
        history.append(record)

        mean_total = sums["total"] / n_batches
        if initial_loss is None:
            initial_loss = max(mean_total, 1e-12)
        if mean_total > 10.0 * initial_loss:
            bad_streak += 1
            if bad_streak >= 3:
                raise DivergenceError(
                    f"loss {mean_total:.4g} exceeded 10x the initial "
                    f"{initial_loss:.4g} for 3 consecutive epochs"
                )
        else:
            bad_streak = 0

    return adapt, history


def evaluate(model: AdaptModel, labeled_set: LabeledFeatureSet):
    """Argmax accuracy and confusion matrix on a labeled evaluation set."""
    if labeled_set.hard_labels is None:
        raise ValueError("evaluation set needs hard labels")
    latent, _ = embed_forward(model.embedding, labeled_set.features)
    pred = classify(model.classifier, latent).argmax(axis=1)
    y = labeled_set.hard_labels
    acc = float(np.mean(pred == y))
    confusion = np.zeros((model.n_classes, model.n_classes), dtype=np.int64)
    for true, hat in zip(y, pred):
        confusion[true, hat] += 1
    return acc, confusion
