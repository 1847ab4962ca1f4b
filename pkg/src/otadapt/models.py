"""Embedding network, linear softmax classifier, and k-NN memory bank.

A small dense network with manual forward/backward passes on numpy, a
single-layer softmax classifier, classic SGD with momentum, and a
momentum-averaged store of per-sample source latents that backs the k-NN
labeler. Forward and gradient computations are pure given the parameters;
parameter and bank updates mutate their owners and are single-writer.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .cost_geometry import one_hot

__all__ = [
    "MlpEmbedding",
    "LinearClassifier",
    "MemoryBank",
    "SgdConfig",
    "SgdState",
    "EmbedTape",
    "UpstreamGrads",
    "embed_forward",
    "classify",
    "cross_entropy",
    "parameter_gradients",
    "backward_and_step",
    "knn_predict",
    "bank_update",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1
LOG_EPS = 1e-12


def _glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class MlpEmbedding:
    """Dense layers with leaky-ReLU after every layer.

    ``layer_sizes`` runs from the input width to the latent width, e.g.
    (784, 128, 64). Weights start Glorot-uniform from the given seed.
    """

    def __init__(self, layer_sizes, slope: float = 0.01, seed: int = 0):
        sizes = list(layer_sizes)
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output width")
        rng = np.random.default_rng(seed)
        self.slope = float(slope)
        self.weights = [
            _glorot_uniform(rng, sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)
        ]
        self.biases = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]
        self.seed = int(seed)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def latent_dim(self):
        return self.weights[-1].shape[1]

    def parameters(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def n_parameters(self):
        return sum(p.size for p in self.parameters())


class LinearClassifier:
    """Single dense layer with softmax outputs."""

    def __init__(self, latent_dim: int, n_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.W = _glorot_uniform(rng, latent_dim, n_classes)
        self.b = np.zeros(n_classes)

    @property
    def n_classes(self):
        return self.W.shape[1]

    def parameters(self):
        return [self.W, self.b]


@dataclass
class MemoryBank:
    """Momentum-averaged latent per source sample."""

    latents: np.ndarray
    momentum: float = 0.5

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float64)
        if self.latents.ndim != 2:
            raise ValueError("bank latents must be N x d")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")

    def __len__(self):
        return self.latents.shape[0]


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be a positive integer")


@dataclass
class SgdState:
    """Per-parameter velocity buffers, threaded through update steps."""

    velocities: list | None = None


@dataclass
class EmbedTape:
    """Activation record from one forward pass, enough for exact backprop."""

    inputs: np.ndarray
    pre_activations: list
    activations: list


@dataclass
class UpstreamGrads:
    """Loss gradients entering the model stack.

    ``latent``: d(loss)/d(latent) contributions that bypass the classifier.
    ``logits``: d(loss)/d(logits) contributions through the classifier.
    """

    latent: np.ndarray
    logits: np.ndarray


def embed_forward(model: MlpEmbedding, batch: np.ndarray) -> tuple[np.ndarray, EmbedTape]:
    """Forward pass returning the latent batch and its activation tape."""
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.weights[0].shape[0]:
        raise ValueError(
            f"batch shape {X.shape} does not match input width "
            f"{model.weights[0].shape[0]}"
        )
    if not np.all(np.isfinite(X)):
        raise ValueError("batch contains non-finite values")
    pre, act = [], []
    h = X
    for W, b in zip(model.weights, model.biases):
        z = h @ W + b
        h = np.where(z > 0, z, model.slope * z)
        pre.append(z)
        act.append(h)
    return h, EmbedTape(X, pre, act)


def _embed_backward(model, tape, grad_latent):
    """Parameter gradients from a latent gradient; returns the flat list."""
    grads = []
    dh = grad_latent
    for layer in range(len(model.weights) - 1, -1, -1):
        z = tape.pre_activations[layer]
        dz = dh * np.where(z > 0, 1.0, model.slope)
        prev = tape.inputs if layer == 0 else tape.activations[layer - 1]
        grads.append(dz.sum(axis=0))  # bias
        grads.append(prev.T @ dz)  # weight
        if layer > 0:
            dh = dz @ model.weights[layer].T
    grads.reverse()
    return grads


def classify(clf: LinearClassifier, latent: np.ndarray) -> np.ndarray:
    """Row-stochastic softmax(latent W + b)."""
    Z = np.asarray(latent, dtype=np.float64)
    logits = Z @ clf.W + clf.b
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(soft_labels: np.ndarray, hard_labels: np.ndarray):
    """Mean negative log-likelihood and its gradient in the logits.

    ``soft_labels`` must be the softmax output of the logits the gradient
    is taken in; then d(loss)/d(logits) = (softmax - onehot) / batch.
    """
    P = np.asarray(soft_labels, dtype=np.float64)
    y = np.asarray(hard_labels)
    n, k = P.shape
    if y.shape != (n,):
        raise ValueError("one hard label per row required")
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"labels out of range for {k} classes")
    picked = np.clip(P[np.arange(n), y], LOG_EPS, None)
    loss = float(-np.mean(np.log(picked)))
    grad = (P - one_hot(y, k)) / n
    return loss, grad


def parameter_gradients(
    model: MlpEmbedding,
    clf: LinearClassifier,
    tape: EmbedTape,
    upstream: UpstreamGrads,
) -> list:
    """Gradients for every parameter, ordered like the parameter lists."""
    latent = tape.activations[-1]
    d_logits = np.asarray(upstream.logits, dtype=np.float64)
    d_latent = np.asarray(upstream.latent, dtype=np.float64)
    if d_logits.shape != (latent.shape[0], clf.n_classes):
        raise ValueError("logit gradient shape mismatch")
    if d_latent.shape != latent.shape:
        raise ValueError("latent gradient shape mismatch")
    clf_grads = [latent.T @ d_logits, d_logits.sum(axis=0)]
    total_latent = d_latent + d_logits @ clf.W.T
    return _embed_backward(model, tape, total_latent) + clf_grads


def backward_and_step(
    model: MlpEmbedding,
    clf: LinearClassifier,
    tape: EmbedTape,
    upstream: UpstreamGrads,
    cfg: SgdConfig,
    state: SgdState | None = None,
) -> SgdState:
    """Backpropagate and apply one momentum SGD step in place.

    Velocity update v <- momentum * v - lr * g, then p <- p + v. Returns
    the (possibly fresh) optimizer state so momentum persists across calls.
    Aborts without touching parameters when any gradient is non-finite.
    """
    grads = parameter_gradients(model, clf, tape, upstream)
    params = model.parameters() + clf.parameters()
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                "non-finite gradient encountered; step aborted"
            )
    if state is None:
        state = SgdState()
    if state.velocities is None:
        state.velocities = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state.velocities):
        v *= cfg.momentum
        v -= cfg.learning_rate * g
        p += v
    return state


def knn_predict(
    bank: MemoryBank,
    source_labels: np.ndarray,
    target_latent: np.ndarray,
    k: int,
) -> np.ndarray:
    """Majority vote over the k nearest bank entries (squared Euclidean).

    Ties in the vote go to the smallest class index; ties in distance go to
    the smaller bank index (stable order). Distances are taken against the
    stored bank latents, not live embeddings.
    """
    if len(bank) == 0:
        raise ValueError("memory bank is empty")
    if not 1 <= k <= len(bank):
        raise ValueError(f"k must be in [1, {len(bank)}], got {k}")
    y = np.asarray(source_labels)
    if y.shape != (len(bank),):
        raise ValueError("one label per bank entry required")
    Z = np.asarray(target_latent, dtype=np.float64)
    d2 = (
        np.sum(Z * Z, axis=1)[:, None]
        + np.sum(bank.latents * bank.latents, axis=1)[None, :]
        - 2.0 * Z @ bank.latents.T
    )
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    votes = y[order]
    n_classes = int(y.max()) + 1
    out = np.empty(Z.shape[0], dtype=np.int64)
    for i in range(Z.shape[0]):
        out[i] = np.argmax(np.bincount(votes[i], minlength=n_classes))
    return out


def bank_update(
    bank: MemoryBank,
    indices: np.ndarray,
    fresh_latents: np.ndarray,
    momentum: float | None = None,
) -> MemoryBank:
    """bank[i] <- m * bank[i] + (1 - m) * fresh[i] for the touched indices."""
    m = bank.momentum if momentum is None else float(momentum)
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    ix = np.asarray(indices, dtype=np.int64)
    fresh = np.asarray(fresh_latents, dtype=np.float64)
    if ix.ndim != 1 or fresh.shape != (ix.shape[0], bank.latents.shape[1]):
        raise ValueError("indices and fresh latents must align")
    if ix.size and (ix.min() < 0 or ix.max() >= len(bank)):
        raise ValueError("bank index out of range")
    bank.latents[ix] = m * bank.latents[ix] + (1.0 - m) * fresh
    return bank


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    """Stable hash of a JSON-serializable configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path, model: MlpEmbedding, clf: LinearClassifier,
                    bank: MemoryBank | None = None, config: dict | None = None):
    """Write a versioned JSON checkpoint with all parameters."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "layer_sizes": model.layer_sizes,
        "slope": model.slope,
        "weights": [W.tolist() for W in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "clf_W": clf.W.tolist(),
        "clf_b": clf.b.tolist(),
        "bank": None if bank is None else {
            "latents": bank.latents.tolist(),
            "momentum": bank.momentum,
        },
        "config_hash": config_hash(config or {}),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    """Read a checkpoint back into model, classifier, and optional bank."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('version')!r}"
        )
    model = MlpEmbedding(payload["layer_sizes"], slope=payload["slope"],
                         seed=payload["seed"])
    model.weights = [np.asarray(W, dtype=np.float64) for W in payload["weights"]]
    model.biases = [np.asarray(b, dtype=np.float64) for b in payload["biases"]]
    clf = LinearClassifier(model.latent_dim, len(payload["clf_b"]))
    clf.W = np.asarray(payload["clf_W"], dtype=np.float64)
    clf.b = np.asarray(payload["clf_b"], dtype=np.float64)
    bank = None
    if payload["bank"] is not None:
        bank = MemoryBank(
            np.asarray(payload["bank"]["latents"], dtype=np.float64),
            momentum=payload["bank"]["momentum"],
        )
    return model, clf, bank, payload["config_hash"]
