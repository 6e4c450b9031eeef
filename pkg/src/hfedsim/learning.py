"""Small trainable models, the regularized local objective, SGD loops, evaluation.

Model parameters are flat float64 vectors of length ``arch.param_count``;
every function here is pure and deterministic given its inputs and seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericDivergenceError

MODEL_KINDS = ("logistic", "mlp")


@dataclass(frozen=True)
class ModelArch:
    """Architecture descriptor: logistic regression or a 1-hidden-layer tanh MLP."""

    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ConfigurationError("input_dim must be >= 1 and num_classes >= 2")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise ConfigurationError("mlp requires hidden_dim >= 1")

    @property
    def layers(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer; each layer holds fan_in*fan_out weights + fan_out biases."""
        if self.kind == "logistic":
            return [(self.input_dim, self.num_classes)]
        return [(self.input_dim, self.hidden_dim), (self.hidden_dim, self.num_classes)]

    @property
    def param_count(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layers)


@dataclass(frozen=True)
class Shard:
    """One device's local dataset: feature matrix [n, input_dim] and int labels [n]."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ConfigurationError("features must be [n, d], labels must be [n]")
        if len(self.features) != len(self.labels) or len(self.labels) == 0:
            raise ConfigurationError("shard needs >= 1 sample with matching labels")

    @property
    def n(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float  # learning rate
    rho: float  # proximal weight toward the downloaded anchor model
    epochs: int  # local passes per round
    batch_size: int

    def __post_init__(self):
        if self.gamma < 0 or self.rho < 0:
            raise ConfigurationError("gamma and rho must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")


def init_params(arch: ModelArch, seed: int) -> np.ndarray:
    """Glorot-uniform init: each layer drawn from U(-a, a), a = sqrt(6/(fan_in+fan_out))."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in arch.layers:
        a = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-a, a, size=fan_in * fan_out + fan_out))
    return np.concatenate(chunks)


def unpack(arch: ModelArch, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat parameter vector into per-layer (W [fan_in, fan_out], b [fan_out]) views."""
    if params.shape != (arch.param_count,):
        raise ConfigurationError(
            f"expected {arch.param_count} parameters, got shape {params.shape}"
        )
    out = []
    pos = 0
    for fan_in, fan_out in arch.layers:
        w = params[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos : pos + fan_out]
        pos += fan_out
        out.append((w, b))
    return out


def _forward(arch: ModelArch, params: np.ndarray, x: np.ndarray):
    """Return (logits, hidden_activation_or_None)."""
    if x.shape[1] != arch.input_dim:
        raise ConfigurationError(
            f"features have dim {x.shape[1]}, arch expects {arch.input_dim}"
        )
    layers = unpack(arch, params)
    if arch.kind == "logistic":
        (w, b), = layers
        return x @ w + b, None
    (w1, b1), (w2, b2) = layers
    h = np.tanh(x @ w1 + b1)
    return h @ w2 + b2, h


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _loss_grad_xy(
    params: np.ndarray, arch: ModelArch, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    """Hot path shared by loss_and_grad and the SGD loop; skips revalidation."""
    layers = unpack(arch, params)
    if arch.kind == "logistic":
        (w, b), = layers
        h = None
        logits = x @ w + b
    else:
        (w1, b1), (w2, b2) = layers
        h = np.tanh(x @ w1 + b1)
        logits = h @ w2 + b2

    n = len(y)
    rows = np.arange(n)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    norm = probs.sum(axis=1)
    loss = float((np.log(norm) - shifted[rows, y]).mean())

    dlogits = probs / norm[:, None]
    dlogits[rows, y] -= 1.0
    dlogits /= n

    if arch.kind == "logistic":
        dw = x.T @ dlogits
        db = dlogits.sum(axis=0)
        return loss, np.concatenate([dw.ravel(), db])

    dw2 = h.T @ dlogits
    db2 = dlogits.sum(axis=0)
    dh = (dlogits @ w2.T) * (1.0 - h * h)
    dw1 = x.T @ dh
    db1 = dh.sum(axis=0)
    return loss, np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])


def loss_and_grad(
    params: np.ndarray, arch: ModelArch, batch: Shard
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its analytic gradient."""
    if batch.features.shape[1] != arch.input_dim:
        raise ConfigurationError(
            f"features have dim {batch.features.shape[1]}, arch expects {arch.input_dim}"
        )
    return _loss_grad_xy(params, arch, batch.features, batch.labels)


def grad_regularized(
    params: np.ndarray,
    anchor: np.ndarray,
    arch: ModelArch,
    batch: Shard,
    rho: float,
) -> np.ndarray:
    """Gradient of the proximal local objective: grad(loss) + rho * (params - anchor)."""
    if params.shape != anchor.shape:
        raise ConfigurationError("params and anchor lengths differ")
    _, grad = loss_and_grad(params, arch, batch)
    if rho != 0.0:
        grad = grad + rho * (params - anchor)
    return grad


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    """Per-epoch batch index lists: seeded permutation, sorted within each batch.

    Sorting inside a batch keeps summation order independent of the shuffle, so
    a full-batch step is bit-identical to an unshuffled gradient step.
    """
    perm = rng.permutation(n)
    return [np.sort(perm[k : k + batch_size]) for k in range(0, n, batch_size)]


def local_train(
    start: np.ndarray,
    anchor: np.ndarray,
    arch: ModelArch,
    shard: Shard,
    cfg: TrainConfig,
    seed: int,
    device_id: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Run ``cfg.epochs`` of mini-batch SGD on the anchored objective.

    Returns the final parameter vector and the full-shard gradient of the
    anchored objective at that final point (the gradient reported upstream).
    """
    if start.shape != anchor.shape:
        raise ConfigurationError("start and anchor lengths differ")
    if shard.features.shape[1] != arch.input_dim:
        raise ConfigurationError("shard input_dim does not match architecture")
    rng = np.random.default_rng(seed)
    params = start.copy()
    for _ in range(cfg.epochs):
        for idx in _batches(rng, shard.n, cfg.batch_size):
            _, grad = _loss_grad_xy(params, arch, shard.features[idx], shard.labels[idx])
            if cfg.rho != 0.0:
                grad += cfg.rho * (params - anchor)
            params -= cfg.gamma * grad
            if not np.isfinite(params).all():
                who = "device" if device_id is None else f"device {device_id}"
                raise NumericDivergenceError(f"non-finite weights while training {who}")
    last_grad = grad_regularized(params, anchor, arch, shard, cfg.rho)
    return params, last_grad


def evaluate(params: np.ndarray, arch: ModelArch, test: Shard) -> tuple[float, float]:
    """Accuracy (argmax-correct fraction) and mean cross-entropy on a test shard."""
    logits, _ = _forward(arch, params, test.features)
    logp = _log_softmax(logits)
    preds = logits.argmax(axis=1)
    acc = float((preds == test.labels).mean())
    loss = float(-logp[np.arange(test.n), test.labels].mean())
    return acc, loss
