"""Deterministic feedforward network kernel.

Weights are stored ``out x in`` so a layer computes ``x @ W.T + b``. All
functions are pure: they never mutate their inputs, and every array held by
a :class:`NetworkParams` is read-only.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError, ShapeError
from .rng import Stream

ACTIVATIONS = ("relu", "identity")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class NetworkConfig:
    """Layer widths, activations and init seed of a fully connected network.

    ``activations`` covers the hidden layers only (default relu for each).
    ``output_activation`` is identity for regression networks; split-network
    heads set it to relu because their output feeds further layers.
    """

    layer_sizes: tuple[int, ...]
    activations: tuple[str, ...] | None = None
    seed: int = 0
    output_activation: str = "identity"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigError(f"layer_sizes needs at least 2 entries, got {sizes}")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"layer widths must be >= 1, got {sizes}")
        n_hidden = len(sizes) - 2
        acts = ("relu",) * n_hidden if self.activations is None else tuple(self.activations)
        if len(acts) != n_hidden:
            raise ConfigError(f"expected {n_hidden} hidden activations, got {len(acts)}")
        for a in (*acts, self.output_activation):
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
        object.__setattr__(self, "activations", acts)
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def layer_activations(self) -> tuple[str, ...]:
        return (*self.activations, self.output_activation)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(o, i) for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:])]

    @property
    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.shapes)

    def require_scalar_output(self):
        if self.layer_sizes[-1] != 1:
            raise ConfigError(
                f"regression networks need output width 1, got {self.layer_sizes[-1]}"
            )


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """Ordered ``(weight, bias)`` pairs plus the activation after each layer."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        layers = tuple((_frozen(w), _frozen(b)) for w, b in self.layers)
        if not layers:
            raise ShapeError("a network needs at least one layer")
        if len(self.activations) != len(layers):
            raise ShapeError("one activation per layer is required")
        for k, (w, b) in enumerate(layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != layers[k - 1][0].shape[0]:
                raise ShapeError(
                    f"layer {k} expects width {w.shape[1]}, "
                    f"previous layer emits {layers[k - 1][0].shape[0]}"
                )
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "activations", tuple(self.activations))

    @property
    def input_width(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_width(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_width, *(w.shape[0] for w, _ in self.layers))

    def same_shape(self, other: NetworkParams) -> bool:
        return all(
            w.shape == w2.shape and b.shape == b2.shape
            for (w, b), (w2, b2) in zip(self.layers, other.layers)
        ) and len(self.layers) == len(other.layers)

    def __eq__(self, other):
        # bit-exact comparison, so -0.0 != 0.0 and NaN payloads are compared too
        if not isinstance(other, NetworkParams):
            return NotImplemented
        return (
            self.activations == other.activations
            and self.same_shape(other)
            and flatten(self).tobytes() == flatten(other).tobytes()
        )

    def __hash__(self):
        return hash(self.checksum())

    def checksum(self) -> str:
        return params_checksum(flatten(self))


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    inputs: np.ndarray
    pre: tuple[np.ndarray, ...]
    post: tuple[np.ndarray, ...]

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


@dataclass(frozen=True, eq=False)
class Gradients:
    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    d_input: np.ndarray = field(default=None)


def params_checksum(vector: np.ndarray) -> str:
    data = np.ascontiguousarray(vector, dtype="<f8").tobytes()
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def init_network(config: NetworkConfig) -> NetworkParams:
    """Glorot-uniform weights, zero biases, drawn layer by layer from one stream."""
    stream = Stream(config.seed)
    layers = []
    for out_w, in_w in config.shapes:
        limit = np.sqrt(6.0 / (in_w + out_w))
        u = stream.uniform(out_w * in_w).reshape(out_w, in_w)
        layers.append(((2.0 * u - 1.0) * limit, np.zeros(out_w)))
    return NetworkParams(tuple(layers), config.layer_activations)


def _as_batch(batch, width: int) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1) if width != 1 or x.size == 1 else x.reshape(-1, 1)
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"batch shape {x.shape} does not match input width {width}")
    if not np.all(np.isfinite(x)):
        raise InputError("batch contains non-finite values")
    return x


def forward(params: NetworkParams, batch) -> tuple[np.ndarray, ForwardTrace]:
    """Run a batch through the network.

    Returns a length-``b`` vector when the output width is 1, otherwise the
    ``b x out`` matrix, plus the trace needed by :func:`backward`.
    """
    x = _as_batch(batch, params.input_width)
    pre, post = [], []
    h = x
    for (w, b), act in zip(params.layers, params.activations):
        z = h @ w.T + b
        h = np.maximum(z, 0.0) if act == "relu" else z
        pre.append(z)
        post.append(h)
    trace = ForwardTrace(x, tuple(pre), tuple(post))
    out = h[:, 0] if params.output_width == 1 else h
    return out, trace


def mse_loss(predictions, labels) -> tuple[float, np.ndarray]:
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if pred.size == 0:
        raise InputError("mse_loss needs at least one sample")
    if pred.shape != y.shape:
        raise ShapeError(f"{pred.size} predictions vs {y.size} labels")
    diff = pred - y
    n = pred.size
    return float(diff @ diff) / n, (2.0 / n) * diff


def backward(params: NetworkParams, trace: ForwardTrace, d_output) -> Gradients:
    """Reverse-mode gradients for every weight and bias, plus d_loss/d_input.

    ``d_output`` is the upstream gradient with respect to the network output:
    a length-``b`` vector for scalar networks or a ``b x out`` matrix.
    """
    if len(trace.pre) != len(params.layers):
        raise ShapeError(
            f"trace has {len(trace.pre)} layers, network has {len(params.layers)}"
        )
    for k, ((w, _), z) in enumerate(zip(params.layers, trace.pre)):
        if z.shape != (trace.batch_size, w.shape[0]):
            raise ShapeError(f"trace layer {k} has shape {z.shape}, expected out {w.shape[0]}")
    g = np.asarray(d_output, dtype=np.float64)
    if g.ndim == 1:
        g = g.reshape(-1, 1)
    if g.shape != trace.output.shape:
        raise ShapeError(f"upstream gradient {g.shape} vs output {trace.output.shape}")

    grads = [None] * len(params.layers)
    for k in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[k]
        if params.activations[k] == "relu":
            g = g * (trace.pre[k] > 0.0)
        layer_in = trace.post[k - 1] if k else trace.inputs
        grads[k] = (g.T @ layer_in, g.sum(axis=0))
        g = g @ w
    return Gradients(tuple(grads), g)


def sgd_step(params: NetworkParams, grads: Gradients, learning_rate: float) -> NetworkParams:
    if not learning_rate >= 0 or not np.isfinite(learning_rate):
        raise ConfigError(f"learning rate must be finite and nonnegative, got {learning_rate}")
    if len(grads.layers) != len(params.layers):
        raise ShapeError("gradient and parameter layer counts differ")
    layers = []
    for k, ((w, b), (gw, gb)) in enumerate(zip(params.layers, grads.layers)):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeError(f"layer {k}: gradient shape does not match parameters")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient in layer {k}")
        w2, b2 = w - learning_rate * gw, b - learning_rate * gb
        if not (np.all(np.isfinite(w2)) and np.all(np.isfinite(b2))):
            raise NumericError(f"parameters overflowed in layer {k}")
        layers.append((w2, b2))
    return NetworkParams(tuple(layers), params.activations)


def flatten(params: NetworkParams) -> np.ndarray:
    """Layer by layer: weights row-major, then biases."""
    parts = []
    for w, b in params.layers:
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten(vector, config: NetworkConfig) -> NetworkParams:
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.size != config.param_count:
        raise ShapeError(
            f"vector of length {v.size} does not fit {config.layer_sizes} "
            f"({config.param_count} parameters)"
        )
    layers, pos = [], 0
    for out_w, in_w in config.shapes:
        w = v[pos : pos + out_w * in_w].reshape(out_w, in_w)
        pos += out_w * in_w
        b = v[pos : pos + out_w]
        pos += out_w
        layers.append((w, b))
    return NetworkParams(tuple(layers), config.layer_activations)


def config_of(params: NetworkParams, seed: int = 0) -> NetworkConfig:
    """Reconstruct a config describing the shape and activations of ``params``."""
    return NetworkConfig(
        params.layer_sizes,
        params.activations[:-1],
        seed=seed,
        output_activation=params.activations[-1],
    )


def train_step(params: NetworkParams, batch, labels, learning_rate: float):
    """One MSE + SGD update on a batch. Returns ``(new_params, loss)``.

    Overflow surfaces as NumericError rather than a floating-point warning.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        pred, trace = forward(params, batch)
        loss, d_pred = mse_loss(pred, labels)
        if not np.isfinite(loss):
            raise NumericError("loss is not finite")
        grads = backward(params, trace, d_pred)
        return sgd_step(params, grads, learning_rate), loss


def predict(params: NetworkParams, features, batch_size: int | None = None) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if batch_size is None or batch_size >= n:
        out, _ = forward(params, x) if n else (np.empty(0), None)
        return out
    chunks = [forward(params, x[i : i + batch_size])[0] for i in range(0, n, batch_size)]
    return np.concatenate(chunks)


def concat_layers(parts: Sequence[NetworkParams]) -> NetworkParams:
    """Stack networks end to end (output of each feeds the next)."""
    layers, acts = [], []
    for p in parts:
        layers.extend(p.layers)
        acts.extend(p.activations)
    return NetworkParams(tuple(layers), tuple(acts))
