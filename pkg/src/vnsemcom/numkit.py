"""Deterministic numeric kernel: dense nets with exact backprop, SGD, seeded streams.

Tensors are plain ``numpy.ndarray`` values in float64. Networks are immutable;
every training step returns a new ``DenseNet``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, TrainingError

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
LOSS_KINDS = ("mse", "cross_entropy")


class RngStream:
    """A named random stream derived from a master seed.

    The stream id is hashed into the seed sequence, so distinct ids give
    independent PCG64 generators and the same (seed, id) pair always replays
    the same draws. Normals come from numpy's ziggurat sampler.
    """

    def __init__(self, master_seed: int, stream_id: str):
        self.master_seed = int(master_seed)
        self.stream_id = str(stream_id)
        digest = hashlib.sha256(self.stream_id.encode("utf-8")).digest()
        key = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
        seq = np.random.SeedSequence([self.master_seed & 0xFFFFFFFFFFFFFFFF, *key])
        self.state = int(seq.generate_state(1, np.uint64)[0])
        self.gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, suffix) -> "RngStream":
        return RngStream(self.master_seed, f"{self.stream_id}/{suffix}")

    def uniform(self, size=None):
        return self.gen.random(size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_id={self.stream_id!r})"


def rng_draw(stream: RngStream, dist: str, n: int) -> np.ndarray:
    if n < 1:
        raise ConfigurationError(f"draw count must be >= 1, got {n}")
    if dist == "uniform01":
        return stream.uniform(n)
    if dist == "standard_normal":
        return stream.normal(n)
    raise ConfigurationError(f"unknown distribution {dist!r}")


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class DenseNet:
    layers: tuple

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ConfigurationError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.out_dim,):
                raise DimensionError(
                    f"layer {i}: bias shape {layer.bias.shape} does not match weights {layer.weights.shape}")
            if i and self.layers[i - 1].out_dim != layer.in_dim:
                raise DimensionError(
                    f"layer {i}: in-dim {layer.in_dim} does not chain with previous out-dim "
                    f"{self.layers[i - 1].out_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def param_count(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)

    @property
    def sizes(self) -> list:
        return [self.in_dim] + [l.out_dim for l in self.layers]

    @property
    def activations(self) -> list:
        return [l.activation for l in self.layers]


def init_net(sizes: Sequence[int], activations: Sequence[str], rng: RngStream) -> DenseNet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization for weights and biases."""
    if len(activations) != len(sizes) - 1:
        raise ConfigurationError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform((fan_out, fan_in)) * 2 * bound - bound
        b = rng.uniform(fan_out) * 2 * bound - bound
        layers.append(Layer(w, b, act))
    return DenseNet(tuple(layers))


def flatten(net: DenseNet) -> np.ndarray:
    parts = []
    for layer in net.layers:
        parts.append(layer.weights.ravel())
        parts.append(layer.bias.ravel())
    return np.concatenate(parts)


def unflatten(like: DenseNet, flat: np.ndarray) -> DenseNet:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (like.param_count,):
        raise DimensionError(f"flat parameter vector has shape {flat.shape}, net needs ({like.param_count},)")
    layers, pos = [], 0
    for layer in like.layers:
        nw, nb = layer.weights.size, layer.bias.size
        w = flat[pos:pos + nw].reshape(layer.weights.shape).copy()
        pos += nw
        b = flat[pos:pos + nb].copy()
        pos += nb
        layers.append(Layer(w, b, layer.activation))
    return DenseNet(tuple(layers))


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        # split form avoids overflow in exp for large |z|
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    return z


def _activation_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


def _as_batch(net: DenseNet, x) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.in_dim:
        raise DimensionError(f"input shape {x.shape} does not match network input [batch x {net.in_dim}]")
    return xb, single


def forward(net: DenseNet, x) -> np.ndarray:
    xb, single = _as_batch(net, x)
    a = xb
    for layer in net.layers:
        a = _activate(layer.activation, a @ layer.weights.T + layer.bias)
    return a[0] if single else a


def forward_trace(net: DenseNet, x) -> list:
    """Forward pass keeping (input, pre-activation, output) per layer for backprop."""
    a, _ = _as_batch(net, x)
    trace = []
    for layer in net.layers:
        z = a @ layer.weights.T + layer.bias
        out = _activate(layer.activation, z)
        trace.append((a, z, out))
        a = out
    return trace


def backprop(net: DenseNet, trace: list, grad_out: np.ndarray) -> tuple:
    """Push dL/d(output) back through the net.

    Returns (flat parameter gradient in ``flatten`` order, dL/d(input)).
    """
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    parts = []
    for layer, (a_in, z, a_out) in zip(reversed(net.layers), reversed(trace)):
        gz = g * _activation_grad(layer.activation, z, a_out)
        parts.append((gz.T @ a_in, gz.sum(axis=0)))
        g = gz @ layer.weights
    flat = np.concatenate([p for gw, gb in reversed(parts) for p in (gw.ravel(), gb)])
    return flat, g


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, count))
    out[np.arange(labels.size), labels] = 1.0
    return out


def loss_and_grad(loss_kind: str, y: np.ndarray, target: np.ndarray) -> tuple:
    """Loss value and dL/dy. ``mse`` averages over every element; ``cross_entropy``
    treats ``y`` as logits and averages over the batch."""
    if loss_kind == "mse":
        diff = y - target
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    if loss_kind == "cross_entropy":
        p = softmax(y)
        logp = np.log(np.clip(p, 1e-300, None))
        batch = y.shape[0]
        return float(-np.sum(target * logp) / batch), (p * target.sum(axis=1, keepdims=True) - target) / batch
    raise ConfigurationError(f"unknown loss kind {loss_kind!r}")


def backward(net: DenseNet, x, loss_kind: str, target) -> tuple:
    if loss_kind not in LOSS_KINDS:
        raise ConfigurationError(f"unknown loss kind {loss_kind!r}")
    xb, _ = _as_batch(net, x)
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 1:
        t = t[None, :]
    if t.shape[0] != xb.shape[0]:
        raise DimensionError(f"input batch {xb.shape[0]} != target batch {t.shape[0]}")
    trace = forward_trace(net, xb)
    loss, gy = loss_and_grad(loss_kind, trace[-1][2], t)
    grads, _ = backprop(net, trace, gy)
    return loss, grads


def sgd_step(net: DenseNet, grads, lr: float) -> DenseNet:
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != (net.param_count,):
        raise DimensionError(f"gradient length {grads.shape} != param_count {net.param_count}")
    if lr < 0:
        raise ConfigurationError(f"learning rate must be non-negative, got {lr}")
    if lr == 0:
        return net
    return unflatten(net, flatten(net) - lr * grads)


def fit(net: DenseNet, x, target, loss_kind: str, epochs: int, lr: float, batch_size: int,
        rng: RngStream, tag: str = "") -> tuple:
    """Minibatch SGD. Returns (trained net, per-epoch mean loss)."""
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = x.shape[0]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = backward(net, x[idx], loss_kind, target[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(grads)):
                raise TrainingError(f"{tag + ': ' if tag else ''}loss diverged at epoch {epoch}")
            net = sgd_step(net, grads, lr)
            total += loss * len(idx)
        history.append(total / n)
    return net, history
