"""The base-learner: a weight-normalized feature extractor, a treatment
embedding table with one row per group (including the held-out one), and a
dense output head over the concatenated representations.

``inner_update`` is the k-shot update operator: it runs a fixed number of
full-batch gradient steps on a task slice and returns fresh weights without
mutating its input, so identical (weights, data, config, seed) always give
identical results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn_core
from .data_model import TaskData
from .errors import ConfigError, DataError, NumericError, ShapeError
from .nn_core import (
    DenseLayer,
    DropoutSpec,
    FlatParams,
    OptimizerState,
    activation_grad,
    dense_backward,
    dense_forward,
    dropout_mask,
    flatten_arrays,
    init_dense_layer,
    optimizer_step,
    unflatten,
)
from .task_selection import TaskSpec

# Hyperparameter grids used by the published search space; values outside
# these are accepted but reported as off-grid by `off_grid_fields`.
PAPER_GRIDS = {
    "n_layers": (2, 4, 6, 8),
    "hidden_dim": (8, 16, 32, 64, 128),
    "embedding_dim": (8, 16, 32, 64, 128),
    "activation": ("relu", "tanh"),
    "dropout_rate": (0.05, 0.1, 0.2),
    "reg_kind": ("l1", "l2", "both"),
    "reg_strength": (1e-2, 1e-3, 1e-4, 1e-5, 1e-6),
    "optimizer": ("adam", "sgd"),
    "inner_iterations": (1, 2, 5),
}

EMBEDDING_INIT_SCALE = 0.05


@dataclass(frozen=True)
class BaseLearnerConfig:
    n_layers: int = 2
    hidden_dim: int = 16
    embedding_dim: int = 8
    activation: str = "tanh"
    dropout_rate: float = 0.2
    reg_kind: str = "l2"
    reg_strength: float = 1e-4
    optimizer: str = "sgd"
    learning_rate: float = 0.1
    inner_iterations: int = 5
    head_kind: str = "linear"

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"extractor activation must be relu or tanh, got {self.activation!r}")
        if self.reg_kind not in ("l1", "l2", "both"):
            raise ConfigError(f"unknown reg_kind {self.reg_kind!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.head_kind not in ("linear", "sigmoid"):
            raise ConfigError(f"unknown head_kind {self.head_kind!r}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.learning_rate < 0.0:
            raise ConfigError("learning_rate must be non-negative")
        if self.inner_iterations < 0:
            raise ConfigError("inner_iterations must be non-negative")

    def l1_l2(self) -> tuple[float, float]:
        if self.reg_kind == "l1":
            return self.reg_strength, 0.0
        if self.reg_kind == "l2":
            return 0.0, self.reg_strength
        return self.reg_strength, self.reg_strength


def off_grid_fields(config: BaseLearnerConfig) -> list[str]:
    """Config fields whose values fall outside the published grids."""
    out = []
    for name, grid in PAPER_GRIDS.items():
        if getattr(config, name) not in grid:
            out.append(name)
    return out


@dataclass
class BaseLearnerWeights:
    """All trainable state: extractor stack, embedding table, output head."""

    extractor: list[DenseLayer]
    embeddings: np.ndarray  # (n_groups, embedding_dim)
    head: DenseLayer

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ShapeError("embedding table must be 2-D (groups x embedding dim)")
        concat_dim = self.extractor[-1].n_out + self.embeddings.shape[1]
        if self.head.n_in != concat_dim:
            raise ShapeError(
                f"head expects {self.head.n_in} inputs but extractor+embedding give {concat_dim}"
            )

    @property
    def n_groups(self) -> int:
        return self.embeddings.shape[0]

    @property
    def n_features(self) -> int:
        return self.extractor[0].n_in

    def clone(self) -> "BaseLearnerWeights":
        return BaseLearnerWeights(
            [layer.clone() for layer in self.extractor],
            self.embeddings.copy(),
            self.head.clone(),
        )

    def to_flat(self) -> FlatParams:
        named: list[tuple[str, np.ndarray]] = []
        for i, layer in enumerate(self.extractor):
            named.append((f"extractor.{i}.v", layer.v))
            named.append((f"extractor.{i}.gain", layer.gain))
            named.append((f"extractor.{i}.bias", layer.bias))
        named.append(("embeddings", self.embeddings))
        named.append(("head.v", self.head.v))
        named.append(("head.gain", self.head.gain))
        named.append(("head.bias", self.head.bias))
        return flatten_arrays(named)

    @classmethod
    def from_flat(cls, flat: FlatParams, template: "BaseLearnerWeights") -> "BaseLearnerWeights":
        arrays = unflatten(flat)
        extractor = [
            DenseLayer(
                arrays[f"extractor.{i}.v"],
                arrays[f"extractor.{i}.gain"],
                arrays[f"extractor.{i}.bias"],
                layer.activation,
            )
            for i, layer in enumerate(template.extractor)
        ]
        head = DenseLayer(
            arrays["head.v"], arrays["head.gain"], arrays["head.bias"], template.head.activation
        )
        return cls(extractor, arrays["embeddings"], head)


def init_weights(
    config: BaseLearnerConfig, n_features: int, n_groups: int, rng: np.random.Generator
) -> BaseLearnerWeights:
    """Random initialization; the embedding table covers every group."""
    if n_groups < 2:
        raise ConfigError("need at least two treatment groups")
    extractor = []
    n_in = n_features
    for _ in range(config.n_layers):
        extractor.append(init_dense_layer(rng, n_in, config.hidden_dim, config.activation))
        n_in = config.hidden_dim
    embeddings = rng.uniform(
        -EMBEDDING_INIT_SCALE, EMBEDDING_INIT_SCALE, size=(n_groups, config.embedding_dim)
    )
    head = init_dense_layer(rng, config.hidden_dim + config.embedding_dim, 1, "identity")
    return BaseLearnerWeights(extractor, embeddings, head)


# ---------------------------------------------------------------------------
# Forward / backward through the composite network
# ---------------------------------------------------------------------------


def _check_groups(weights: BaseLearnerWeights, group_ids: np.ndarray) -> np.ndarray:
    g = np.asarray(group_ids, dtype=np.int64)
    if g.size and (g.min() < 0 or g.max() >= weights.n_groups):
        raise DataError(
            f"group id out of range: embedding table has {weights.n_groups} rows"
        )
    return g


def forward(
    weights: BaseLearnerWeights,
    x: np.ndarray,
    group_ids: np.ndarray,
    config: BaseLearnerConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    kind: str = "regression",
) -> np.ndarray:
    """Predictions for a batch: extractor(x) ++ embeddings[g] -> head.

    Classification applies a sigmoid on the head output, so values land in
    (0, 1); eval mode disables dropout and is fully deterministic.
    """
    g = _check_groups(weights, group_ids)
    x = np.asarray(x, dtype=np.float64)
    dropout = DropoutSpec(config.dropout_rate, mode)
    h = x
    for layer in weights.extractor:
        h = dense_forward(h, layer)
        if mode == "train" and config.dropout_rate > 0.0:
            if rng is None:
                raise ConfigError("train-mode forward requires an RNG stream for dropout")
            h = h * dropout_mask(rng, h.shape, dropout.rate)
    concat = np.concatenate([h, weights.embeddings[g]], axis=1)
    z = dense_forward(concat, weights.head)[:, 0]
    if kind == "classification":
        return nn_core.apply_activation("sigmoid", z)
    return z


def loss_and_grads(
    weights: BaseLearnerWeights,
    x: np.ndarray,
    group_ids: np.ndarray,
    y: np.ndarray,
    kind: str,
    config: BaseLearnerConfig,
    rng: np.random.Generator | None = None,
    train: bool = True,
) -> tuple[float, FlatParams]:
    """Exact gradients of mean task loss + regularization.

    Regularization covers direction matrices and the embedding rows active
    in the batch; untouched embedding rows receive a strictly zero gradient,
    which is what keeps the held-out group's embedding frozen under plain
    training.
    """
    g = _check_groups(weights, group_ids)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape[0] == 0:
        raise DataError("empty batch")
    if x.shape[0] != y.size or x.shape[0] != g.size:
        raise ShapeError("batch arrays must share their first dimension")
    l1, l2 = config.l1_l2()
    loss_kind = "binary_cross_entropy" if kind == "classification" else "mse"
    head_act = "sigmoid" if kind == "classification" else "identity"

    # forward with caches
    caches = []
    h = x
    for i, layer in enumerate(weights.extractor):
        x_in = h
        try:
            out = dense_forward(x_in, layer)
        except NumericError as exc:
            raise NumericError(f"extractor layer {i}: {exc}") from None
        mask = None
        if train and config.dropout_rate > 0.0:
            if rng is None:
                raise ConfigError("train-mode gradients require an RNG stream for dropout")
            mask = dropout_mask(rng, out.shape, config.dropout_rate)
            h = out * mask
        else:
            h = out
        caches.append((x_in, out, mask))
    emb_rows = weights.embeddings[g]
    concat = np.concatenate([h, emb_rows], axis=1)
    z = dense_forward(concat, weights.head)
    pred = nn_core.apply_activation(head_act, z[:, 0]).reshape(-1, 1)

    y2 = y.reshape(-1, 1)
    loss = nn_core.loss_value(pred, y2, loss_kind)
    active = np.unique(g)
    loss += nn_core.regularization_value(
        [layer.v for layer in weights.extractor] + [weights.head.v], l1, l2
    )
    loss += nn_core.regularization_value([weights.embeddings[active]], l1, l2)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")

    # backward
    dz = nn_core.output_delta(pred, y2, loss_kind, head_act)
    dconcat, dv_head, dg_head, db_head = dense_backward(weights.head, concat, dz)
    dv_head += nn_core.regularization_grad(weights.head.v, l1, l2)
    hidden_dim = weights.extractor[-1].n_out
    grad_h = dconcat[:, :hidden_dim]
    grad_emb_rows = dconcat[:, hidden_dim:]
    demb = np.zeros_like(weights.embeddings)
    np.add.at(demb, g, grad_emb_rows)
    demb[active] += nn_core.regularization_grad(weights.embeddings[active], l1, l2)

    per_layer: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    grad_out = grad_h
    for i in range(len(weights.extractor) - 1, -1, -1):
        layer = weights.extractor[i]
        x_in, out, mask = caches[i]
        if mask is not None:
            grad_out = grad_out * mask
        dz_i = grad_out * activation_grad(layer.activation, out)
        dx, dv, dgain, dbias = dense_backward(layer, x_in, dz_i)
        dv += nn_core.regularization_grad(layer.v, l1, l2)
        per_layer.append((dv, dgain, dbias))
        grad_out = dx
    per_layer.reverse()

    named: list[tuple[str, np.ndarray]] = []
    for i, (dv, dgain, dbias) in enumerate(per_layer):
        named.append((f"extractor.{i}.v", dv))
        named.append((f"extractor.{i}.gain", dgain))
        named.append((f"extractor.{i}.bias", dbias))
    named.append(("embeddings", demb))
    named.append(("head.v", dv_head))
    named.append(("head.gain", dg_head))
    named.append(("head.bias", db_head))
    return loss, flatten_arrays(named)


def inner_update(
    weights: BaseLearnerWeights,
    data: TaskData,
    task: TaskSpec,
    config: BaseLearnerConfig,
    rng: np.random.Generator,
) -> BaseLearnerWeights:
    """The k-shot update operator: ``inner_iterations`` full-batch steps on
    one task slice with a fresh optimizer; the input weights are not mutated."""
    if data.n == 0:
        raise DataError("inner update requires a nonempty data slice")
    flat = weights.to_flat()
    if config.learning_rate == 0.0 or config.inner_iterations == 0:
        return BaseLearnerWeights.from_flat(flat, weights)
    current = BaseLearnerWeights.from_flat(flat, weights)
    state = OptimizerState(kind=config.optimizer, learning_rate=config.learning_rate)
    for _ in range(config.inner_iterations):
        loss, grads = loss_and_grads(
            current, data.x, data.group_ids, data.y, task.kind, config, rng=rng, train=True
        )
        flat = optimizer_step(flat, grads, state)
        current = BaseLearnerWeights.from_flat(flat, weights)
    return current


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def weights_to_dict(weights: BaseLearnerWeights, config_hash: str = "") -> dict:
    flat = weights.to_flat()
    return {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "layout": [[name, list(shape)] for name, shape in flat.layout],
        "values": flat.values.tolist(),
        "activations": {
            "extractor": [layer.activation for layer in weights.extractor],
            "head": weights.head.activation,
        },
    }


def weights_from_dict(doc: dict) -> BaseLearnerWeights:
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    layout = tuple((name, tuple(shape)) for name, shape in doc["layout"])
    flat = FlatParams(np.asarray(doc["values"], dtype=np.float64), layout)
    arrays = unflatten(flat)
    acts = doc["activations"]
    extractor = []
    i = 0
    while f"extractor.{i}.v" in arrays:
        extractor.append(
            DenseLayer(
                arrays[f"extractor.{i}.v"],
                arrays[f"extractor.{i}.gain"],
                arrays[f"extractor.{i}.bias"],
                acts["extractor"][i],
            )
        )
        i += 1
    head = DenseLayer(arrays["head.v"], arrays["head.gain"], arrays["head.bias"], acts["head"])
    return BaseLearnerWeights(extractor, arrays["embeddings"], head)


def save_weights(path: str | Path, weights: BaseLearnerWeights, config_hash: str = "") -> None:
    Path(path).write_text(
        json.dumps(weights_to_dict(weights, config_hash), sort_keys=True), encoding="utf-8"
    )


def load_weights(path: str | Path) -> BaseLearnerWeights:
    return weights_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
