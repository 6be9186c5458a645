"""Dense feed-forward networks with hand-written backpropagation and Adam.

The backward pass returns both the parameter gradient and the input
gradient of ``upstream . output``. The input gradient is what lets a value
network's action-sensitivity be chained through a policy network.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "identity", "sigmoid", "tanh")


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step receives NaN or Inf gradient entries."""


class Direction(enum.Enum):
    ASCENT = 1.0
    DESCENT = -1.0


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_slope(z, a, kind):
    # ReLU subgradient at exactly 0 is taken as 0.
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    if kind == "sigmoid":
        return a * (1.0 - a)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bad layer shapes: weight {self.weight.shape}, bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class Gradients:
    """Parameter and input gradients of ``sum(upstream * output)``.

    ``d_params`` is ordered like :meth:`Mlp.params` (weight, bias per layer).
    For a batched call the parameter gradients are summed over the batch
    while ``d_input`` keeps one row per sample.
    """

    d_params: list
    d_input: np.ndarray


class Mlp:
    """A stack of :class:`Dense` layers."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].weight.shape[1] != layers[k - 1].weight.shape[0]:
                raise ValueError(
                    f"layer {k} expects {layers[k].weight.shape[1]} inputs but "
                    f"layer {k - 1} produces {layers[k - 1].weight.shape[0]}"
                )
        self.layers = layers

    @classmethod
    def build(
        cls,
        sizes,
        rng,
        hidden_activation="relu",
        output_activation="identity",
        output_value=None,
    ):
        """Randomly initialise a network with layer widths ``sizes``.

        Hidden layers get He-scaled uniform weights and small uniform biases.
        If ``output_value`` is given, the last layer's weights are zeroed and
        its bias is chosen so that every output equals ``output_value`` after
        the output activation.
        """
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        layers = []
        n_layers = len(sizes) - 1
        for k in range(n_layers):
            fan_in, fan_out = sizes[k], sizes[k + 1]
            last = k == n_layers - 1
            act = output_activation if last else hidden_activation
            if last and output_value is not None:
                w = np.zeros((fan_out, fan_in))
                b = np.full(fan_out, _preactivation_for(output_value, act))
            else:
                limit = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
                b = rng.uniform(-1.0, 1.0, size=fan_out) / np.sqrt(fan_in)
            layers.append(Dense(w, b, act))
        return cls(layers)

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].weight.shape[0]

    def params(self):
        """Flat list of parameter arrays (live references, not copies)."""
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    @property
    def n_params(self):
        return sum(p.size for p in self.params())

    def copy(self):
        return Mlp(
            Dense(layer.weight.copy(), layer.bias.copy(), layer.activation)
            for layer in self.layers
        )

    def is_finite(self):
        return all(np.all(np.isfinite(p)) for p in self.params())

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.input_dim:
            raise ValueError(
                f"input of shape {x.shape} does not match input_dim={self.input_dim}"
            )
        return x

    def forward(self, x):
        """Network output for a single input ``(in,)`` or a batch ``(B, in)``."""
        a = self._check_input(x)
        for layer in self.layers:
            a = _activate(a @ layer.weight.T + layer.bias, layer.activation)
        return a

    __call__ = forward

    def backward(self, x, upstream):
        x = self._check_input(x)
        single = x.ndim == 1
        a = np.atleast_2d(x)
        up = np.asarray(upstream, dtype=np.float64)
        if up.shape != x.shape[:-1] + (self.output_dim,):
            raise ValueError(
                f"upstream of shape {up.shape} does not match output_dim={self.output_dim}"
            )
        up = np.atleast_2d(up)

        cache = []
        for layer in self.layers:
            z = a @ layer.weight.T + layer.bias
            out = _activate(z, layer.activation)
            cache.append((a, z, out))
            a = out

        d_params = [None] * (2 * len(self.layers))
        delta = up
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            a_in, z, out = cache[k]
            dz = delta * _activation_slope(z, out, layer.activation)
            d_params[2 * k] = dz.T @ a_in
            d_params[2 * k + 1] = dz.sum(axis=0)
            delta = dz @ layer.weight
        d_input = delta[0] if single else delta
        return Gradients(d_params, d_input)


def _preactivation_for(value, activation):
    if activation == "sigmoid":
        if not 0.0 < value < 1.0:
            raise ValueError("sigmoid output value must lie in (0, 1)")
        return float(np.log(value / (1.0 - value)))
    if activation == "tanh":
        if not -1.0 < value < 1.0:
            raise ValueError("tanh output value must lie in (-1, 1)")
        return float(np.arctanh(value))
    if activation == "relu" and value < 0.0:
        raise ValueError("relu output value must be non-negative")
    return float(value)


def forward(net, x):
    return net.forward(x)


def backward(net, x, upstream):
    """Gradients of ``sum(upstream * net(x))`` w.r.t. parameters and input."""
    return net.backward(x, upstream)


def multiplier_output_clamp(values):
    """Elementwise ``max(v, 0)`` applied to multiplier network outputs."""
    return np.maximum(np.asarray(values, dtype=np.float64), 0.0)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_net(cls, net, **hyper):
        params = net.params()
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **hyper,
        )


def adam_step(net, state, grads, lr, direction=Direction.DESCENT):
    """Apply one Adam update to ``net`` in place.

    ``grads`` is a list aligned with ``net.params()`` (or a :class:`Gradients`).
    ``Direction.ASCENT`` moves along the gradient, ``DESCENT`` against it.
    """
    if isinstance(grads, Gradients):
        grads = grads.d_params
    params = net.params()
    if len(grads) != len(params):
        raise ValueError(f"expected {len(params)} gradient arrays, got {len(grads)}")
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(
                f"non-finite gradient (norm={np.linalg.norm(g)})"
            )

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    sign = Direction(direction).value
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        denom = np.sqrt(v / c2)
        denom += state.epsilon
        step = m * (sign * lr / c1)
        step /= denom
        p += step
    return net, state
