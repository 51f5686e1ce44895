"""Minimal dense-network substrate.

Weight-normalized feed-forward layers, inverted dropout, MSE / binary
cross-entropy losses with exact analytic backprop, SGD and Adam updates,
and a flat parameter vector representation used for weight interpolation.

Everything is float64 numpy, single-threaded, and driven by explicit RNG
streams; independent networks can therefore run on independent threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
LOSS_KINDS = ("mse", "binary_cross_entropy")
OPTIMIZER_KINDS = ("sgd", "adam")

# Floor used when clipping sigmoid outputs inside the cross-entropy loss.
_BCE_EPS = 1e-12


def apply_activation(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return expit(z)
    if kind == "identity":
        return z
    raise ConfigError(f"unknown activation {kind!r}")


def activation_grad(kind: str, out: np.ndarray) -> np.ndarray:
    """d(activation)/dz expressed through the activation output."""
    if kind == "relu":
        return (out > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - out * out
    if kind == "sigmoid":
        return out * (1.0 - out)
    if kind == "identity":
        return np.ones_like(out)
    raise ConfigError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


@dataclass
class DenseLayer:
    """Weight-normalized dense layer.

    The effective weight for output unit j is ``gain[j] * v[:, j] / ||v[:, j]||``,
    so each column's direction and scale are decoupled. Every column of ``v``
    must keep a nonzero norm.
    """

    v: np.ndarray  # (n_in, n_out) direction matrix
    gain: np.ndarray  # (n_out,)
    bias: np.ndarray  # (n_out,)
    activation: str = "identity"

    def __post_init__(self) -> None:
        self.v = np.asarray(self.v, dtype=np.float64)
        self.gain = np.asarray(self.gain, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.v.ndim != 2:
            raise ShapeError("dense layer direction matrix must be 2-D")
        if self.gain.shape != (self.v.shape[1],) or self.bias.shape != (self.v.shape[1],):
            raise ShapeError("gain/bias length must equal the layer output dim")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.v.shape[0]

    @property
    def n_out(self) -> int:
        return self.v.shape[1]

    def clone(self) -> "DenseLayer":
        return DenseLayer(self.v.copy(), self.gain.copy(), self.bias.copy(), self.activation)


def column_norms(layer: DenseLayer) -> np.ndarray:
    norms = np.linalg.norm(layer.v, axis=0)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise NumericError(f"degenerate dense layer: direction column {bad} has zero norm")
    return norms


def effective_weights(layer: DenseLayer) -> np.ndarray:
    """The plain weight matrix the reparameterization denotes."""
    return layer.v * (layer.gain / column_norms(layer))


def init_dense_layer(
    rng: np.random.Generator, n_in: int, n_out: int, activation: str = "identity"
) -> DenseLayer:
    """He-style uniform init scaled by fan-in; gains start at the initial
    column norms so the first forward pass matches the unnormalized init."""
    limit = np.sqrt(6.0 / n_in)
    v = rng.uniform(-limit, limit, size=(n_in, n_out))
    gain = np.linalg.norm(v, axis=0)
    bias = np.zeros(n_out)
    return DenseLayer(v, gain, bias, activation)


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    """activation(x @ W_eff + bias) for a weight-normalized layer."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise ShapeError(
            f"dense layer expects input with {layer.n_in} columns, got shape {x.shape}"
        )
    out = apply_activation(layer.activation, x @ effective_weights(layer) + layer.bias)
    if not np.all(np.isfinite(out)):
        raise NumericError("dense layer produced non-finite activations")
    return out


def dense_backward(
    layer: DenseLayer, x: np.ndarray, dz: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Backprop through the affine part given dL/dz (pre-activation grad).

    Returns (dx, dv, dgain, dbias). The weight-norm chain rule is
        dgain_j = v_j . dW_j / ||v_j||
        dv_j    = (gain_j / ||v_j||) dW_j - (gain_j dgain_j / ||v_j||^2) v_j
    with dW = x^T dz the gradient w.r.t. the effective weights.
    """
    norms = column_norms(layer)
    w_eff = layer.v * (layer.gain / norms)
    dw = x.T @ dz
    dbias = dz.sum(axis=0)
    dx = dz @ w_eff.T
    dgain = (layer.v * dw).sum(axis=0) / norms
    dv = dw * (layer.gain / norms) - layer.v * (layer.gain * dgain / norms**2)
    return dx, dv, dgain, dbias


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DropoutSpec:
    """Inverted dropout: in eval mode the output equals the input exactly."""

    rate: float
    mode: str = "train"

    def __post_init__(self) -> None:
        if not (0.0 <= self.rate < 1.0):
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"dropout mode must be 'train' or 'eval', got {self.mode!r}")


def dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], rate: float) -> np.ndarray:
    """Scaled keep-mask: entries are 0 with probability rate, else 1/(1-rate)."""
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def dropout_apply(
    x: np.ndarray, spec: DropoutSpec, rng: np.random.Generator | None = None
) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if spec.mode == "eval" or spec.rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode requires an RNG stream")
    return x * dropout_mask(rng, x.shape, spec.rate)


# ---------------------------------------------------------------------------
# Flat parameter vectors
# ---------------------------------------------------------------------------

Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass(frozen=True)
class FlatParams:
    """All trainable scalars of a network as one contiguous float64 vector,
    plus the layout needed to rebuild the named arrays.

    flatten -> unflatten is an exact round trip, and the layout is stable
    across clones so flat vectors from two clones can be combined.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self) -> None:
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.values.ndim != 1 or self.values.size != expected:
            raise ShapeError("flat parameter vector does not match its layout")


def flatten_arrays(named: list[tuple[str, np.ndarray]]) -> FlatParams:
    layout = tuple((name, tuple(arr.shape)) for name, arr in named)
    if named:
        values = np.concatenate([np.asarray(arr, dtype=np.float64).ravel() for _, arr in named])
    else:
        values = np.zeros(0)
    return FlatParams(values, layout)


def unflatten(flat: FlatParams) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in flat.layout:
        size = int(np.prod(shape))
        out[name] = flat.values[offset : offset + size].reshape(shape).copy()
        offset += size
    return out


def param_axpy(a: FlatParams, b: FlatParams, scale: float) -> FlatParams:
    """a + scale * (b - a), elementwise.

    scale 0 and 1 return exact copies of a and b respectively, so callers
    can rely on bitwise equality at the interpolation endpoints.
    """
    if a.layout != b.layout:
        raise ShapeError("param_axpy requires identical parameter layouts")
    if scale == 0.0:
        return FlatParams(a.values.copy(), a.layout)
    if scale == 1.0:
        return FlatParams(b.values.copy(), b.layout)
    return FlatParams(a.values + scale * (b.values - a.values), a.layout)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_value(pred: np.ndarray, y: np.ndarray, loss_kind: str) -> float:
    """Mean data loss over every element of the batch."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {y.shape}")
    if loss_kind == "mse":
        return float(np.mean((pred - y) ** 2))
    if loss_kind == "binary_cross_entropy":
        p = np.clip(pred, _BCE_EPS, 1.0 - _BCE_EPS)
        return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))
    raise ConfigError(f"unknown loss {loss_kind!r}")


def output_delta(pred: np.ndarray, y: np.ndarray, loss_kind: str, head_activation: str) -> np.ndarray:
    """dL/dz at the output layer's pre-activation.

    For binary cross-entropy on a sigmoid head the two gradients fuse to the
    numerically exact (pred - y) / n; anything else chains through the head
    activation explicitly.
    """
    n = pred.size
    if loss_kind == "binary_cross_entropy":
        if head_activation != "sigmoid":
            raise ConfigError("binary cross-entropy requires a sigmoid output head")
        return (pred - y) / n
    if loss_kind == "mse":
        dpred = 2.0 * (pred - y) / n
        return dpred * activation_grad(head_activation, pred)
    raise ConfigError(f"unknown loss {loss_kind!r}")


def regularization_value(mats: list[np.ndarray], l1: float, l2: float) -> float:
    total = 0.0
    for m in mats:
        if l1:
            total += l1 * float(np.abs(m).sum())
        if l2:
            total += l2 * float((m * m).sum())
    return total


def regularization_grad(m: np.ndarray, l1: float, l2: float) -> np.ndarray:
    g = np.zeros_like(m)
    if l1:
        g += l1 * np.sign(m)
    if l2:
        g += 2.0 * l2 * m
    return g


# ---------------------------------------------------------------------------
# Backprop over a sequential stack
# ---------------------------------------------------------------------------


def stack_forward(
    net: list[DenseLayer],
    x: np.ndarray,
    dropout: DropoutSpec | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray, np.ndarray | None]]]:
    """Forward pass keeping per-layer caches (input, output, dropout mask).

    Dropout, when given in train mode, follows every layer except the last.
    """
    caches = []
    h = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(net):
        x_in = h
        try:
            out = dense_forward(x_in, layer)
        except NumericError as exc:
            raise NumericError(f"layer {i}: {exc}") from None
        mask = None
        if dropout is not None and dropout.mode == "train" and dropout.rate > 0.0 and i < len(net) - 1:
            mask = dropout_mask(rng, out.shape, dropout.rate)
            h = out * mask
        else:
            h = out
        caches.append((x_in, out, mask))
    return h, caches


def backprop(
    net: list[DenseLayer],
    batch: tuple[np.ndarray, np.ndarray],
    loss_kind: str,
    reg: tuple[float, float] = (0.0, 0.0),
    dropout: DropoutSpec | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[float, FlatParams]:
    """Exact gradients of mean loss + regularization for a sequential net.

    Regularization (l1, l2) applies to the direction matrices only; gains
    and biases are scale/offset parameters and stay unpenalized. Gradient
    arrays come back flattened in layer order as v / gain / bias triples.
    """
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] == 0:
        raise ShapeError("backprop requires a nonempty batch")
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    l1, l2 = reg

    pred, caches = stack_forward(net, x, dropout, rng)
    loss = loss_value(pred, y, loss_kind)
    loss += regularization_value([layer.v for layer in net], l1, l2)

    grads: list[tuple[str, np.ndarray]] = []
    dz = output_delta(pred, y, loss_kind, net[-1].activation)
    grad_out = dz  # already a pre-activation gradient for the last layer
    per_layer: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    for i in range(len(net) - 1, -1, -1):
        layer = net[i]
        x_in, out, mask = caches[i]
        if i == len(net) - 1:
            dz_i = grad_out
        else:
            if mask is not None:
                grad_out = grad_out * mask
            dz_i = grad_out * activation_grad(layer.activation, out)
        dx, dv, dgain, dbias = dense_backward(layer, x_in, dz_i)
        dv += regularization_grad(layer.v, l1, l2)
        per_layer.append((dv, dgain, dbias))
        grad_out = dx
    per_layer.reverse()
    for i, (dv, dgain, dbias) in enumerate(per_layer):
        grads.append((f"layer{i}.v", dv))
        grads.append((f"layer{i}.gain", dgain))
        grads.append((f"layer{i}.bias", dbias))
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")
    return loss, flatten_arrays(grads)


def stack_flatten(net: list[DenseLayer]) -> FlatParams:
    named = []
    for i, layer in enumerate(net):
        named.append((f"layer{i}.v", layer.v))
        named.append((f"layer{i}.gain", layer.gain))
        named.append((f"layer{i}.bias", layer.bias))
    return flatten_arrays(named)


def stack_from_flat(flat: FlatParams, template: list[DenseLayer]) -> list[DenseLayer]:
    arrays = unflatten(flat)
    return [
        DenseLayer(
            arrays[f"layer{i}.v"],
            arrays[f"layer{i}.gain"],
            arrays[f"layer{i}.bias"],
            layer.activation,
        )
        for i, layer in enumerate(template)
    ]


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """SGD (with optional momentum) or Adam over a flat parameter vector.

    Moment buffers are allocated lazily on the first step and must
    shape-match the parameters afterwards; the step counter never decreases.
    """

    kind: str
    learning_rate: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    velocity: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0.0:
            raise ConfigError("learning rate must be non-negative")


def optimizer_step(params: FlatParams, grads: FlatParams, state: OptimizerState) -> FlatParams:
    """One optimizer update; advances the state buffers in place."""
    if params.layout != grads.layout:
        raise ShapeError("parameter and gradient layouts differ")
    p = params.values
    g = grads.values
    if state.kind == "sgd":
        if state.momentum != 0.0:
            if state.velocity is None:
                state.velocity = np.zeros_like(p)
            elif state.velocity.shape != p.shape:
                raise ShapeError("momentum buffer does not match parameter shape")
            state.velocity = state.momentum * state.velocity + g
            update = state.velocity
        else:
            update = g
        state.step_count += 1
        return FlatParams(p - state.learning_rate * update, params.layout)
    # adam
    if state.m is None:
        state.m = np.zeros_like(p)
        state.v = np.zeros_like(p)
    elif state.m.shape != p.shape:
        raise ShapeError("adam moment buffers do not match parameter shape")
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    return FlatParams(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps), params.layout)
