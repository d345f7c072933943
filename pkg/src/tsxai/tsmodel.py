"""Minimal differentiable 1D-CNN regression engine.

Layers operate on batches: conv1d maps ``(B, C_in, T) -> (B, C_out, T)`` with
"same" zero padding along time, flatten maps ``(B, C, T) -> (B, C*T)`` and
dense maps ``(B, D_in) -> (B, D_out)``. A dense layer receiving a 3-D input
flattens it implicitly (row-major), so a bare dense model can consume an
``F x T`` sample directly.

All arithmetic is float64.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "leaky_relu", "relu", "linear")
LAYER_KINDS = ("conv1d", "dense", "flatten")
LEAKY_SLOPE = 0.01
DEFAULT_LRP_EPSILON = 1e-9


class ModelFormatError(ValueError):
    """Malformed model file or layer specification."""


class ShapeMismatchError(ModelFormatError):
    """A layer's parameters or input do not match the declared shapes."""

    def __init__(self, message: str, layer_index: int | None = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class NumericalDegeneracyError(ArithmeticError):
    """Relevance propagation hit an exactly-zero denominator with epsilon = 0."""


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# activations


def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if name == "linear":
        return z
    raise ModelFormatError(f"unknown activation {name!r}")


def activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Derivative of the activation at pre-activation ``z`` (``a`` = activate(z))."""
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if name == "linear":
        return np.ones_like(z)
    raise ModelFormatError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# layer specification


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network.

    conv1d weights have shape ``(out, in, k)``; dense weights ``(out, in)``.
    ``biases`` may be None for a bias-free layer.
    """

    kind: str
    in_size: int = 0
    out_size: int = 0
    kernel_size: int = 1
    dilation: int = 1
    activation: str = "linear"
    weights: np.ndarray | None = None
    biases: np.ndarray | None = None

    @property
    def has_params(self) -> bool:
        return self.kind != "flatten"

    def param_count(self) -> int:
        if not self.has_params:
            return 0
        n = int(self.weights.size) if self.weights is not None else 0
        if self.biases is not None:
            n += int(self.biases.size)
        return n

    def validate(self, index: int | None = None) -> None:
        if self.kind not in LAYER_KINDS:
            raise ModelFormatError(f"unknown layer kind {self.kind!r}")
        if self.kind == "flatten":
            return
        if self.activation not in ACTIVATIONS:
            raise ShapeMismatchError(f"unknown activation {self.activation!r}", index)
        if self.in_size < 1 or self.out_size < 1:
            raise ShapeMismatchError("in/out sizes must be >= 1", index)
        if self.kind == "conv1d":
            if self.kernel_size < 1:
                raise ShapeMismatchError("kernel_size must be >= 1", index)
            if self.dilation < 1:
                raise ShapeMismatchError("dilation must be >= 1", index)
            expected = (self.out_size, self.in_size, self.kernel_size)
        else:
            expected = (self.out_size, self.in_size)
        if self.weights is None or self.weights.shape != expected:
            got = None if self.weights is None else self.weights.shape
            raise ShapeMismatchError(f"weights shape {got}, expected {expected}", index)
        if self.biases is not None and self.biases.shape != (self.out_size,):
            raise ShapeMismatchError(
                f"biases shape {self.biases.shape}, expected ({self.out_size},)", index
            )
        if not np.all(np.isfinite(self.weights)):
            raise ModelFormatError(f"layer {index}: non-finite weights")


def conv1d(in_channels: int, out_channels: int, kernel_size: int, dilation: int = 1,
           activation: str = "tanh", weights=None, biases=None, bias: bool = True) -> LayerSpec:
    w = np.zeros((out_channels, in_channels, kernel_size)) if weights is None else weights
    b = (np.zeros(out_channels) if bias else None) if biases is None else biases
    return LayerSpec("conv1d", in_channels, out_channels, kernel_size, dilation, activation,
                     np.asarray(w, dtype=np.float64),
                     None if b is None else np.asarray(b, dtype=np.float64))


def dense(in_dim: int, out_dim: int, activation: str = "linear", weights=None, biases=None,
          bias: bool = True) -> LayerSpec:
    w = np.zeros((out_dim, in_dim)) if weights is None else weights
    b = (np.zeros(out_dim) if bias else None) if biases is None else biases
    return LayerSpec("dense", in_dim, out_dim, activation=activation,
                     weights=np.asarray(w, dtype=np.float64),
                     biases=None if b is None else np.asarray(b, dtype=np.float64))


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


@dataclass(frozen=True)
class Model:
    """An immutable stack of layers mapping an ``F x T`` sample to a scalar."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.validate()

    def validate(self) -> None:
        """Check per-layer invariants and chain compatibility.

        The output must be a single unit. Any output activation is accepted
        (not only relu) so that linear reference models can be expressed.
        """
        F, T = self.input_shape
        shape: tuple[int, ...] = (F, T)
        for i, layer in enumerate(self.layers):
            layer.validate(i)
            if layer.kind == "conv1d":
                if len(shape) != 2 or shape[0] != layer.in_size:
                    raise ShapeMismatchError(
                        f"conv1d expects {layer.in_size} channels, receives shape {shape}", i)
                shape = (layer.out_size, shape[1])
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            else:
                if int(np.prod(shape)) != layer.in_size:
                    raise ShapeMismatchError(
                        f"dense expects {layer.in_size} inputs, receives shape {shape}", i)
                shape = (layer.out_size,)
        if self.layers and int(np.prod(shape)) != 1:
            raise ShapeMismatchError(f"network output shape {shape} is not scalar")

    @property
    def conv_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "conv1d"]


def parameter_count(model: Model | Sequence[LayerSpec]) -> int:
    layers = model.layers if isinstance(model, Model) else model
    return sum(layer.param_count() for layer in layers)


# ---------------------------------------------------------------------------
# conv primitives (batched)


def _same_padding(kernel_size: int, dilation: int) -> tuple[int, int]:
    total = dilation * (kernel_size - 1)
    left = total // 2
    return left, total - left


def _pad_time(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    left, right = _same_padding(layer.kernel_size, layer.dilation)
    return np.pad(x, ((0, 0), (0, 0), (left, right)))


def _conv_forward(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    T = x.shape[2]
    xp = _pad_time(x, layer)
    d = layer.dilation
    z = np.zeros((x.shape[0], layer.out_size, T))
    for j in range(layer.kernel_size):
        z += np.einsum("oc,bct->bot", layer.weights[:, :, j], xp[:, :, j * d: j * d + T])
    if layer.biases is not None:
        z += layer.biases[None, :, None]
    return z


def _conv_backward_input(layer: LayerSpec, g: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the conv input given ``g = dL/dz`` of shape (B, out, T)."""
    T = g.shape[2]
    left, right = _same_padding(layer.kernel_size, layer.dilation)
    d = layer.dilation
    gp = np.zeros((g.shape[0], layer.in_size, T + left + right))
    for j in range(layer.kernel_size):
        gp[:, :, j * d: j * d + T] += np.einsum("oc,bot->bct", layer.weights[:, :, j], g)
    return gp[:, :, left: left + T]


def _conv_backward_params(layer: LayerSpec, x: np.ndarray, g: np.ndarray):
    T = x.shape[2]
    xp = _pad_time(x, layer)
    d = layer.dilation
    dw = np.empty_like(layer.weights)
    for j in range(layer.kernel_size):
        dw[:, :, j] = np.einsum("bot,bct->oc", g, xp[:, :, j * d: j * d + T])
    db = g.sum(axis=(0, 2)) if layer.biases is not None else None
    return dw, db


def _layer_pre(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    if layer.kind == "conv1d":
        return _conv_forward(layer, x)
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    z = x.reshape(x.shape[0], -1) @ layer.weights.T
    if layer.biases is not None:
        z = z + layer.biases
    return z


def _layer_backward_input(layer: LayerSpec, x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Push ``g = dL/dz`` back to ``dL/dx`` with the shape of ``x``."""
    if layer.kind == "conv1d":
        return _conv_backward_input(layer, g)
    if layer.kind == "flatten":
        return g.reshape(x.shape)
    return (g @ layer.weights).reshape(x.shape)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    """Per-layer inputs, pre-activations and activations of one forward pass.

    ``activations[k]`` is the feature map A^k of layer k (batch axis dropped
    for single-sample traces).
    """

    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    prediction: float

    def __len__(self) -> int:
        return len(self.activations)


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ShapeMismatchError(f"input shape {x.shape} != model input {model.input_shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x


def _forward_batch(model: Model, X: np.ndarray):
    inputs, pres, acts = [], [], []
    h = X
    for layer in model.layers:
        inputs.append(h)
        z = _layer_pre(layer, h)
        a = z if layer.kind == "flatten" else activate(layer.activation, z)
        pres.append(z)
        acts.append(a)
        h = a
    return inputs, pres, acts


def predict_batch(model: Model, X: np.ndarray) -> np.ndarray:
    """Predictions for a stack of samples ``(B, F, T)`` -> ``(B,)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.shape[1:] != model.input_shape:
        raise ShapeMismatchError(f"batch shape {X.shape[1:]} != model input {model.input_shape}")
    h = X
    for layer in model.layers:
        z = _layer_pre(layer, h)
        h = z if layer.kind == "flatten" else activate(layer.activation, z)
    return h.reshape(X.shape[0])


def predict(model: Model, x: np.ndarray) -> float:
    return float(predict_batch(model, _check_input(model, x)[None])[0])


def forward(model: Model, x: np.ndarray) -> tuple[float, ForwardTrace]:
    x = _check_input(model, x)
    inputs, pres, acts = _forward_batch(model, x[None])
    y = float(acts[-1].reshape(-1)[0]) if acts else float("nan")
    trace = ForwardTrace([a[0] for a in inputs], [z[0] for z in pres], [a[0] for a in acts], y)
    return y, trace


def replay(model: Model, activation: np.ndarray, start_layer: int) -> float:
    """Run layers after ``start_layer`` on a (possibly modified) activation."""
    h = np.asarray(activation, dtype=np.float64)[None]
    for layer in model.layers[start_layer + 1:]:
        z = _layer_pre(layer, h)
        h = z if layer.kind == "flatten" else activate(layer.activation, z)
    return float(h.reshape(-1)[0])


def _backward(model: Model, inputs, pres, acts, stop_at: int = -1) -> list[np.ndarray]:
    """Reverse pass from the scalar output down to layer ``stop_at + 1``.

    Returns ``(g_act, g_in)``: ``g_act[k] = dy/dA^k`` for every k > stop_at
    and ``g_in`` the gradient w.r.t. the input of layer ``stop_at + 1``.
    """
    n = len(model.layers)
    g_act = [None] * n
    g = np.ones_like(acts[-1])
    for k in range(n - 1, stop_at, -1):
        g_act[k] = g
        layer = model.layers[k]
        gz = g if layer.kind == "flatten" else g * activation_grad(layer.activation, pres[k], acts[k])
        g = _layer_backward_input(layer, inputs[k], gz)
    return g_act, g


def input_gradient(model: Model, x: np.ndarray) -> np.ndarray:
    """Exact ``dy/dx`` with the shape of ``x``."""
    x = _check_input(model, x)
    inputs, pres, acts = _forward_batch(model, x[None])
    _, g = _backward(model, inputs, pres, acts)
    return g[0]


def feature_map_gradient(model: Model, x: np.ndarray, layer_index: int
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Feature map A of a conv layer and ``dy/dA`` (both ``channels x T``)."""
    if not 0 <= layer_index < len(model.layers):
        raise IndexError(f"layer index {layer_index} out of range")
    if model.layers[layer_index].kind != "conv1d":
        raise ValueError(f"layer {layer_index} is {model.layers[layer_index].kind}, not conv1d")
    x = _check_input(model, x)
    inputs, pres, acts = _forward_batch(model, x[None])
    g_act, _ = _backward(model, inputs, pres, acts, stop_at=layer_index - 1)
    return acts[layer_index][0], g_act[layer_index][0]


def backprop_layer(model: Model, x: np.ndarray, layer_index: int, grad_out: np.ndarray
                   ) -> np.ndarray:
    """Chain ``dy/dA^k`` of layer ``layer_index`` back to that layer's input."""
    x = _check_input(model, x)
    inputs, pres, acts = _forward_batch(model, x[None])
    layer = model.layers[layer_index]
    g = np.asarray(grad_out)[None]
    if layer.kind != "flatten":
        g = g * activation_grad(layer.activation, pres[layer_index], acts[layer_index])
    return _layer_backward_input(layer, inputs[layer_index], g)[0]


# ---------------------------------------------------------------------------
# relevance propagation (epsilon rule)


def _stabilize(z: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon > 0:
        return z + np.where(z >= 0, epsilon, -epsilon)
    if np.any(z == 0):
        raise NumericalDegeneracyError("zero LRP denominator with epsilon = 0")
    return z


def relevance_propagate(model: Model, x: np.ndarray, epsilon: float = DEFAULT_LRP_EPSILON
                        ) -> np.ndarray:
    """Epsilon-rule relevance of every input element.

    Output relevance is initialised to the prediction itself. Each layer
    redistributes ``R_k`` over its inputs in proportion to ``a_j w_jk``;
    biases only enter the denominator, so conservation is exact for
    bias-free networks with ``epsilon = 0``.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = _check_input(model, x)
    inputs, pres, acts = _forward_batch(model, x[None])
    R = acts[-1].copy()
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        a = inputs[k]
        if layer.kind == "flatten":
            R = R.reshape(a.shape)
            continue
        s = R / _stabilize(pres[k], epsilon)
        c = _layer_backward_input(layer, a, s)
        R = a * c
    return R[0]


def relevance_by_layer(model: Model, x: np.ndarray, epsilon: float = DEFAULT_LRP_EPSILON
                       ) -> list[float]:
    """Total relevance at the output and after each layer going down."""
    x = _check_input(model, x)
    inputs, pres, acts = _forward_batch(model, x[None])
    R = acts[-1].copy()
    sums = [float(R.sum())]
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        a = inputs[k]
        if layer.kind == "flatten":
            R = R.reshape(a.shape)
        else:
            R = a * _layer_backward_input(layer, a, R / _stabilize(pres[k], epsilon))
        sums.append(float(R.sum()))
    return sums


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    momentum: float = 0.9


def _param_grads(model: Model, X: np.ndarray, y: np.ndarray):
    inputs, pres, acts = _forward_batch(model, X)
    pred = acts[-1].reshape(len(X))
    resid = pred - y
    with np.errstate(over="ignore", invalid="ignore"):
        loss = float(np.mean(resid ** 2))
    g = (2.0 / len(X)) * resid.reshape(acts[-1].shape)
    grads = [None] * len(model.layers)
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if layer.kind == "flatten":
            g = g.reshape(inputs[k].shape)
            continue
        gz = g * activation_grad(layer.activation, pres[k], acts[k])
        if layer.kind == "conv1d":
            grads[k] = _conv_backward_params(layer, inputs[k], gz)
        else:
            xin = inputs[k].reshape(len(X), -1)
            grads[k] = (gz.T @ xin, gz.sum(axis=0) if layer.biases is not None else None)
        if k > 0:
            g = _layer_backward_input(layer, inputs[k], gz)
    return loss, grads


def train(model: Model, X: np.ndarray, y: np.ndarray, config: TrainConfig = TrainConfig()
          ) -> Model:
    """Mini-batch SGD with momentum on the mean squared error.

    Returns a new Model; the per-epoch mean training loss is stored under
    ``metadata["train_loss"]``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(X) == 0 or len(X) != len(y):
        raise ValueError("training set must be nonempty with one label per sample")
    if config.epochs == 0:
        return model
    rng = np.random.default_rng(config.seed)
    W = [None if l.weights is None else l.weights.copy() for l in model.layers]
    B = [None if l.biases is None else l.biases.copy() for l in model.layers]
    vW = [None if w is None else np.zeros_like(w) for w in W]
    vB = [None if b is None else np.zeros_like(b) for b in B]
    history = []
    current = model
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), config.batch_size):
            idx = order[start: start + config.batch_size]
            loss, grads = _param_grads(current, X[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}, batch offset {start}")
            total += loss * len(idx)
            for k, gr in enumerate(grads):
                if gr is None:
                    continue
                dw, db = gr
                vW[k] = config.momentum * vW[k] - config.learning_rate * dw
                W[k] = W[k] + vW[k]
                if db is not None:
                    vB[k] = config.momentum * vB[k] - config.learning_rate * db
                    B[k] = B[k] + vB[k]
            current = _with_params(model, W, B)
        history.append(total / len(X))
        log.debug("epoch %d loss %.6g", epoch, history[-1])
        if not math.isfinite(history[-1]):
            raise TrainingDivergedError(f"loss became non-finite at epoch {epoch}")
    meta = dict(model.metadata)
    meta.update(train_loss=history, train_seed=config.seed)
    return replace(current, metadata=meta)


def _with_params(model: Model, W, B) -> Model:
    layers = [l if not l.has_params else replace(l, weights=W[i], biases=B[i])
              for i, l in enumerate(model.layers)]
    return _unchecked_model(layers, model)


def _unchecked_model(layers, template: Model) -> Model:
    # shapes are unchanged during training, skip re-validation
    m = object.__new__(Model)
    object.__setattr__(m, "layers", tuple(layers))
    object.__setattr__(m, "input_shape", template.input_shape)
    object.__setattr__(m, "metadata", dict(template.metadata))
    return m


# ---------------------------------------------------------------------------
# construction helpers


def init_model(F: int, T: int, conv_channels: Sequence[int] = (12, 12, 12, 12),
               kernel_size: int = 5, dilation: int = 2, dense_units: Sequence[int] = (32, 16),
               conv_activation: str = "tanh", dense_activation: str = "leaky_relu",
               output_activation: str = "relu", bias: bool = True, seed: int = 0,
               name: str = "dcnn") -> Model:
    """Glorot-uniform initialised conv stack + dense head (scalar output)."""
    rng = np.random.default_rng(seed)
    layers = []
    cin = F
    for cout in conv_channels:
        fan_in, fan_out = cin * kernel_size, cout * kernel_size
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        layers.append(conv1d(cin, cout, kernel_size, dilation, conv_activation,
                             weights=rng.uniform(-lim, lim, (cout, cin, kernel_size)), bias=bias))
        cin = cout
    layers.append(flatten())
    din = cin * T
    units_list = list(dense_units) + [1]
    for i, units in enumerate(units_list):
        lim = math.sqrt(6.0 / (din + units))
        act = output_activation if i == len(units_list) - 1 else dense_activation
        layers.append(dense(din, units, act, weights=rng.uniform(-lim, lim, (units, din)),
                            bias=bias))
        din = units
    if bias and output_activation == "relu":
        # start in the live region of the output relu
        layers[-1] = replace(layers[-1], biases=np.ones(1))
    return Model(layers, (F, T), {"name": name, "init_seed": seed})


def dcnn_architecture(F: int = 20, T: int = 161, filters: int | Sequence[int] = 32,
                      kernel_size: int = 10, blocks: int = 4, block_size: int = 4,
                      fc: Sequence[int] = (256, 100)) -> list[LayerSpec]:
    """Zero-weight layer list of the dilated 1-D CNN family (for counting).

    ``filters`` is either one count for every conv layer or one per block.
    Only shapes matter here; no weights are allocated beyond zeros.
    """
    per_block = [filters] * blocks if isinstance(filters, int) else list(filters)
    layers = []
    cin = F
    for b in range(blocks):
        for _ in range(block_size):
            layers.append(conv1d(cin, per_block[b], kernel_size, 2, "tanh"))
            cin = per_block[b]
    layers.append(flatten())
    din = cin * T
    for units in fc:
        layers.append(dense(din, units, "leaky_relu"))
        din = units
    layers.append(dense(din, 1, "relu"))
    return layers


# ---------------------------------------------------------------------------
# file format


def _fmt_numbers(values: np.ndarray) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in np.ravel(values)) + "]"


def _layer_to_json(layer: LayerSpec) -> str:
    if layer.kind == "flatten":
        return json.dumps({"kind": "flatten"})
    head = {"kind": layer.kind, "in": layer.in_size, "out": layer.out_size}
    if layer.kind == "conv1d":
        head.update(k=layer.kernel_size, dilation=layer.dilation)
    head["activation"] = layer.activation
    body = json.dumps(head)[:-1]
    biases = "null" if layer.biases is None else _fmt_numbers(layer.biases)
    return f'{body}, "weights": {_fmt_numbers(layer.weights)}, "biases": {biases}}}'


def dumps_model(model: Model) -> str:
    layers = ",\n    ".join(_layer_to_json(l) for l in model.layers)
    meta = json.dumps(model.metadata, sort_keys=True, default=_json_default)
    return (f'{{"input_shape": {list(model.input_shape)},\n  "layers": [\n    {layers}\n  ],\n'
            f'  "metadata": {meta}}}\n')


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def save_model(model: Model, path: str | Path) -> None:
    Path(path).write_text(dumps_model(model))


def _parse_layer(i: int, d: dict) -> LayerSpec:
    kind = d.get("kind")
    if kind == "flatten":
        return flatten()
    if kind not in ("conv1d", "dense"):
        raise ModelFormatError(f"layer {i}: unknown kind {kind!r}")
    try:
        cin, cout = int(d["in"]), int(d["out"])
        k = int(d.get("k", 1))
        dil = int(d.get("dilation", 1))
        act = d.get("activation", "linear")
        raw_w = np.asarray(d["weights"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"layer {i}: {exc}") from exc
    shape = (cout, cin, k) if kind == "conv1d" else (cout, cin)
    if raw_w.ndim == 1:
        if raw_w.size != int(np.prod(shape)):
            raise ShapeMismatchError(
                f"{raw_w.size} weight values for declared shape {shape}", i)
        w = raw_w.reshape(shape)
    else:
        if raw_w.shape != shape:
            raise ShapeMismatchError(f"weights shape {raw_w.shape}, declared {shape}", i)
        w = raw_w
    b = d.get("biases")
    b = None if b is None else np.asarray(b, dtype=np.float64).reshape(-1)
    if b is not None and b.shape != (cout,):
        raise ShapeMismatchError(f"{b.size} biases for {cout} outputs", i)
    layer = LayerSpec(kind, cin, cout, k, dil, act, w, b)
    layer.validate(i)
    return layer


def loads_model(text: str) -> Model:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "layers" not in doc or "input_shape" not in doc:
        raise ModelFormatError("model file needs 'input_shape' and 'layers'")
    layers = [_parse_layer(i, d) for i, d in enumerate(doc["layers"])]
    return Model(layers, tuple(doc["input_shape"]), doc.get("metadata", {}))


def load_model(path: str | Path) -> Model:
    return loads_model(Path(path).read_text())
