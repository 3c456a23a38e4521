"""Small dense models with hand-derived gradients.

Everything runs on float64 numpy arrays; 32-bit floats appear only at the
persistence boundary (see deltastore). Two architectures are supported: a
linear map and a one-hidden-layer ReLU network, each with a configurable
loss head. Gradients are written out explicitly and checked against central
finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from .seeding import rng_from

Head = Literal["softmax_ce", "sigmoid_bce", "identity_mse"]

# probability clamp applied before any log() in the cross-entropy heads
PROB_EPS = 1e-7

HEADS = ("softmax_ce", "sigmoid_bce", "identity_mse")
KINDS = ("linear", "mlp1")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture plus loss head; the parameter layout is a pure function
    of this description, so two models built from equal specs are always
    parameter-compatible."""

    kind: Literal["linear", "mlp1"]
    input_dim: int
    output_dim: int
    hidden_dim: int = 0
    activation: Literal["relu"] = "relu"
    head: Head = "softmax_ce"
    bias: bool = True

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.activation != "relu":
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if self.kind == "mlp1" and self.hidden_dim < 1:
            raise ValueError("mlp1 requires hidden_dim >= 1")

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) pairs defining the parameter vector."""
        if self.kind == "linear":
            out: list[tuple[str, tuple[int, ...]]] = [("W", (self.output_dim, self.input_dim))]
            if self.bias:
                out.append(("b", (self.output_dim,)))
            return out
        out = [("W1", (self.hidden_dim, self.input_dim))]
        if self.bias:
            out.append(("b1", (self.hidden_dim,)))
        out.append(("W2", (self.output_dim, self.hidden_dim)))
        if self.bias:
            out.append(("b2", (self.output_dim,)))
        return out


@dataclass
class ParamVector:
    """Ordered, named collection of dense float64 arrays.

    Two vectors are combinable only when their layouts (names and shapes,
    in order) match exactly.
    """

    layers: list[tuple[str, np.ndarray]]
    _by_name: dict[str, np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        names = [n for n, _ in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("duplicate layer names in ParamVector")
        self._by_name = {n: a for n, a in self.layers}

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.layers]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, tuple(a.shape)) for n, a in self.layers]

    def get(self, name: str) -> np.ndarray:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"no layer named {name!r}; have {self.names}") from None

    def _check_compatible(self, other: "ParamVector") -> None:
        if self.layout() != other.layout():
            raise ValueError(
                f"incompatible parameter layouts: {self.layout()} vs {other.layout()}"
            )

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check_compatible(other)
        return ParamVector([(n, a + b) for (n, a), (_, b) in zip(self.layers, other.layers)])

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check_compatible(other)
        return ParamVector([(n, a - b) for (n, a), (_, b) in zip(self.layers, other.layers)])

    def scale(self, factor: float) -> "ParamVector":
        return ParamVector([(n, a * factor) for n, a in self.layers])

    def copy(self) -> "ParamVector":
        return ParamVector([(n, a.copy()) for n, a in self.layers])

    def zeros_like(self) -> "ParamVector":
        return ParamVector([(n, np.zeros_like(a)) for n, a in self.layers])

    def flat(self) -> np.ndarray:
        """Concatenation of all layers in order (row-major per layer)."""
        return np.concatenate([a.ravel() for _, a in self.layers])

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for _, a in self.layers)

    def validate_finite(self) -> None:
        for n, a in self.layers:
            if not np.isfinite(a).all():
                raise ValueError(f"non-finite values in layer {n!r}")

    @staticmethod
    def from_flat(
        layout: "Sequence[tuple[str, tuple[int, ...]]] | ParamVector", vec: np.ndarray
    ) -> "ParamVector":
        if isinstance(layout, ParamVector):
            layout = [(n, a.shape) for n, a in layout.layers]
        vec = np.asarray(vec, dtype=np.float64)
        sizes = [int(np.prod(shape)) for _, shape in layout]
        if vec.size != sum(sizes):
            raise ValueError(f"flat vector of size {vec.size} does not match layout {layout}")
        out, pos = [], 0
        for (name, shape), size in zip(layout, sizes):
            out.append((name, vec[pos : pos + size].reshape(shape).copy()))
            pos += size
        return ParamVector(out)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: Literal["sgd", "rmsprop"]
    learning_rate: float
    momentum: float = 0.0
    lr_decay: float = 0.0
    rho: float = 0.9
    epsilon: float = 1e-7

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "rmsprop"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


def sgd(learning_rate: float, momentum: float = 0.0, lr_decay: float = 0.0) -> OptimizerConfig:
    return OptimizerConfig("sgd", learning_rate, momentum=momentum, lr_decay=lr_decay)


def rmsprop(learning_rate: float, rho: float = 0.9, epsilon: float = 1e-7) -> OptimizerConfig:
    return OptimizerConfig("rmsprop", learning_rate, rho=rho, epsilon=epsilon)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform init on [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 2:
        fan_out, fan_in = shape
    else:
        fan_out = fan_in = shape[0]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Deterministic init: Glorot-uniform weights, zero biases."""
    rng = rng_from(seed)
    layers = []
    for name, shape in spec.layout():
        if name.startswith("W"):
            layers.append((name, glorot_uniform(rng, shape)))
        else:
            layers.append((name, np.zeros(shape)))
    return ParamVector(layers)


def _affine(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    z = x @ w.T
    if b is not None:
        z = z + b
    return z


def forward_batch(spec: ModelSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Logits for a batch of inputs, shape (n, output_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected inputs of shape (n, {spec.input_dim}), got {x.shape}")
    if spec.kind == "linear":
        return _affine(x, params.get("W"), params.get("b") if spec.bias else None)
    z1 = _affine(x, params.get("W1"), params.get("b1") if spec.bias else None)
    a1 = np.maximum(z1, 0.0)
    return _affine(a1, params.get("W2"), params.get("b2") if spec.bias else None)


def forward(spec: ModelSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Logits for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d input, got shape {x.shape}")
    return forward_batch(spec, params, x[None, :])[0]


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax."""
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _coerce_batch(spec: ModelSpec, batch) -> tuple[np.ndarray, np.ndarray]:
    """Accept either (X, Y) arrays or an iterable of (x, y) pairs."""
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        x, y = batch
    else:
        pairs = list(batch)
        if not pairs:
            raise ValueError("empty batch")
        x = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
        if spec.head == "softmax_ce":
            y = np.asarray([p[1] for p in pairs])
        else:
            y = np.stack([np.asarray(p[1], dtype=np.float64) for p in pairs])
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n, d) input batch, got shape {x.shape}")
    if spec.head == "softmax_ce":
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ValueError("softmax_ce targets must be a class index per example")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("softmax_ce targets must be integer class indices")
            y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= spec.output_dim:
            raise ValueError(f"class index out of range [0, {spec.output_dim})")
    else:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (x.shape[0], spec.output_dim):
            raise ValueError(
                f"{spec.head} targets must have shape (n, {spec.output_dim}), got {y.shape}"
            )
    return x, y


def _head_loss_and_grad(
    spec: ModelSpec, z: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the logits."""
    n = z.shape[0]
    if spec.head == "softmax_ce":
        p = softmax(z)
        picked = np.clip(p[np.arange(n), y], PROB_EPS, 1.0 - PROB_EPS)
        loss = float(-np.log(picked).mean())
        grad = p.copy()
        grad[np.arange(n), y] -= 1.0
        return loss, grad / n
    if spec.head == "sigmoid_bce":
        p = sigmoid(z)
        pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
        per = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean(axis=1)
        # analytic gradient ignores the clamp; the clamp only bites at |z| > ~16
        return float(per.mean()), (p - y) / (n * z.shape[1])
    # identity_mse: 0.5 * ||z - y||^2 per example
    diff = z - y
    loss = float(0.5 * (diff**2).sum(axis=1).mean())
    return loss, diff / n


def compute_loss(spec: ModelSpec, params: ParamVector, batch) -> float:
    x, y = _coerce_batch(spec, batch)
    z = forward_batch(spec, params, x)
    loss, _ = _head_loss_and_grad(spec, z, y)
    return loss


def backward(spec: ModelSpec, params: ParamVector, batch) -> ParamVector:
    """Gradient of the mean batch loss, laid out like the parameters."""
    x, y = _coerce_batch(spec, batch)
    if spec.kind == "linear":
        z = _affine(x, params.get("W"), params.get("b") if spec.bias else None)
        _, dz = _head_loss_and_grad(spec, z, y)
        grads = [("W", dz.T @ x)]
        if spec.bias:
            grads.append(("b", dz.sum(axis=0)))
        return ParamVector(grads)
    w1, w2 = params.get("W1"), params.get("W2")
    z1 = _affine(x, w1, params.get("b1") if spec.bias else None)
    a1 = np.maximum(z1, 0.0)
    z2 = _affine(a1, w2, params.get("b2") if spec.bias else None)
    _, dz2 = _head_loss_and_grad(spec, z2, y)
    da1 = dz2 @ w2
    dz1 = da1 * (z1 > 0.0)
    grads = [("W1", dz1.T @ x)]
    if spec.bias:
        grads.append(("b1", dz1.sum(axis=0)))
    grads.append(("W2", dz2.T @ a1))
    if spec.bias:
        grads.append(("b2", dz2.sum(axis=0)))
    return ParamVector(grads)


def init_optimizer_state(params: ParamVector) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(a) for n, a in params.layers}


def optimizer_step(
    state: dict[str, np.ndarray] | None,
    params: ParamVector,
    grad: ParamVector,
    config: OptimizerConfig,
    iteration: int,
) -> tuple[ParamVector, dict[str, np.ndarray]]:
    """One update; returns fresh params and slot state (inputs untouched)."""
    params._check_compatible(grad)
    if state is None:
        state = init_optimizer_state(params)
    new_layers: list[tuple[str, np.ndarray]] = []
    new_state: dict[str, np.ndarray] = {}
    if config.kind == "sgd":
        lr_t = config.learning_rate / (1.0 + config.lr_decay * iteration)
        for (name, w), (_, g) in zip(params.layers, grad.layers):
            v = config.momentum * state[name] - lr_t * g
            new_state[name] = v
            new_layers.append((name, w + v))
    else:  # rmsprop
        for (name, w), (_, g) in zip(params.layers, grad.layers):
            s = config.rho * state[name] + (1.0 - config.rho) * g**2
            new_state[name] = s
            new_layers.append((name, w - config.learning_rate * g / (np.sqrt(s) + config.epsilon)))
    return ParamVector(new_layers), new_state


def train(
    spec: ModelSpec,
    params: ParamVector,
    data,
    epochs: int,
    batch_size: int,
    config: OptimizerConfig,
    seed: int,
) -> ParamVector:
    """Minibatch training with a deterministic per-epoch shuffle.

    `data` is either (X, Y) arrays or an iterable of (x, y) pairs. The last
    partial batch is included. Returns the trained parameters; the inputs
    are left untouched.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    x, y = _coerce_batch(spec, data)
    n = x.shape[0]
    rng = rng_from(seed)
    state = init_optimizer_state(params)
    iteration = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            grad = backward(spec, params, (x[idx], y[idx]))
            params, state = optimizer_step(state, params, grad, config, iteration)
            iteration += 1
    return params


def predict_proba(spec: ModelSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Head-transformed outputs for a batch (softmax rows, sigmoids, or raw)."""
    z = forward_batch(spec, params, x)
    if spec.head == "softmax_ce":
        return softmax(z)
    if spec.head == "sigmoid_bce":
        return sigmoid(z)
    return z
