"""Dense math, losses and a small MLP with hand-written backprop.

Everything here works on float64 numpy arrays. An ``Mlp`` accepts either a
single vector ``(in_dim,)`` or a batch ``(batch, in_dim)``; the batch axis is
just carried through, it is never reduced inside the network.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConfigError",
    "FrozenError",
    "Mlp",
    "ActivationCache",
    "Grads",
    "Adam",
    "SGD",
    "softmax",
    "kl_divergence",
    "mse",
    "param_hash",
]


class ConfigError(ValueError):
    """Raised on dimension mismatches and invalid hyperparameters."""


class FrozenError(RuntimeError):
    """Raised when an optimizer is asked to update a frozen network."""


@dataclass
class ActivationCache:
    """Per-layer inputs and post-activation outputs from one forward pass."""

    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def clear(self):
        self.inputs.clear()
        self.outputs.clear()

    def __len__(self):
        return len(self.inputs)


class Mlp:
    """Fully connected network, tanh on hidden layers.

    ``layers`` holds ``(W, b)`` pairs with ``W`` shaped ``(out, in)``.
    The final layer is linear unless ``tanh_output`` is set.
    """

    def __init__(self, layers, tanh_output=False, frozen=False):
        layers = [(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64)) for w, b in layers]
        if not layers:
            raise ConfigError("an Mlp needs at least one layer")
        for i, (w, b) in enumerate(layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != layers[i - 1][0].shape[0]:
                raise ConfigError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer gives {layers[i - 1][0].shape[0]}"
                )
        self.layers = layers
        self.tanh_output = tanh_output
        self.frozen = frozen

    @classmethod
    def init(cls, sizes, rng, tanh_output=False, zero_last=False):
        """Random init for widths ``sizes = [in, h1, ..., out]``; biases start at zero."""
        if len(sizes) < 2:
            raise ConfigError("sizes must list at least input and output width")
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
            layers.append((w, np.zeros(fan_out)))
        if zero_last:
            layers[-1] = (np.zeros_like(layers[-1][0]), np.zeros_like(layers[-1][1]))
        return cls(layers, tanh_output=tanh_output)

    @property
    def in_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self):
        return self.layers[-1][0].shape[0]

    @property
    def layer_count(self):
        return len(self.layers)

    @property
    def sizes(self):
        return [self.in_dim] + [w.shape[0] for w, _ in self.layers]

    def copy(self):
        return Mlp([(w.copy(), b.copy()) for w, b in self.layers], self.tanh_output, self.frozen)

    def _activates(self, i):
        return i < len(self.layers) - 1 or self.tanh_output

    def forward(self, x, cache=None):
        """Run the network; fills ``cache`` (which must be empty) for ``backward``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ConfigError(f"input width {x.shape[-1]} != network input {self.in_dim}")
        if cache is not None and len(cache):
            raise ConfigError("activation cache must be empty before forward")
        h = x
        for i, (w, b) in enumerate(self.layers):
            if cache is not None:
                cache.inputs.append(h)
            h = h @ w.T + b
            if self._activates(i):
                h = np.tanh(h)
            if cache is not None:
                cache.outputs.append(h)
        return h

    def backward(self, cache, grad_out, grads=None):
        """Backpropagate ``grad_out``; returns the gradient wrt the forward input.

        Parameter gradients are accumulated into ``grads`` when given. Pass
        ``grads=None`` for frozen networks: the input gradient is still exact.
        """
        if len(cache) != len(self.layers):
            raise ConfigError("cache does not come from this network")
        delta = np.asarray(grad_out, dtype=np.float64)
        if delta.shape != cache.outputs[-1].shape:
            raise ConfigError(f"output gradient {delta.shape} != output {cache.outputs[-1].shape}")
        for i in range(len(self.layers) - 1, -1, -1):
            w, _ = self.layers[i]
            if self._activates(i):
                a = cache.outputs[i]
                delta = delta * (1.0 - a * a)
            x_in = cache.inputs[i]
            if grads is not None:
                d2 = delta.reshape(-1, delta.shape[-1])
                grads.weights[i] += d2.T @ x_in.reshape(-1, x_in.shape[-1])
                grads.biases[i] += d2.sum(axis=0)
            delta = delta @ w
        if grads is not None:
            grads.count += 1
        return delta

    def parameters(self):
        for w, b in self.layers:
            yield w
            yield b


@dataclass
class Grads:
    """Gradient buffers shaped like an ``Mlp``'s parameters."""

    weights: list
    biases: list
    count: int = 0

    @classmethod
    def like(cls, mlp):
        return cls([np.zeros_like(w) for w, _ in mlp.layers], [np.zeros_like(b) for _, b in mlp.layers])

    def zero(self):
        for g in self.weights + self.biases:
            g.fill(0.0)
        self.count = 0

    def arrays(self):
        for gw, gb in zip(self.weights, self.biases):
            yield gw
            yield gb

    def scale(self, factor):
        for g in self.arrays():
            g *= factor


class SGD:
    def __init__(self, lr):
        self.lr = lr
        self.step_count = 0

    def step(self, mlp, grads):
        _check_trainable(mlp, grads)
        for p, g in zip(mlp.parameters(), grads.arrays()):
            p -= self.lr * g
        grads.zero()
        self.step_count += 1


class Adam:
    """Adam with bias correction. One instance per network."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = None
        self.v = None

    def step(self, mlp, grads):
        _check_trainable(mlp, grads)
        params = list(mlp.parameters())
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads.arrays(), self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            # g is zeroed below, so it doubles as scratch space
            np.multiply(g, g, out=g)
            g *= 1.0 - self.beta2
            v += g
            np.divide(v, c2, out=g)
            np.sqrt(g, out=g)
            g += self.eps
            np.divide(m, g, out=g)
            g *= self.lr / c1
            p -= g
        grads.zero()


def _check_trainable(mlp, grads):
    if mlp.frozen:
        raise FrozenError("refusing to update a frozen network")
    if grads.count < 1:
        raise ConfigError("optimizer step without any accumulated gradient")


def softmax(scores, temperature=1.0):
    """Max-shifted softmax of ``scores / temperature``."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("softmax of an empty vector")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(s)):
        raise ValueError("softmax scores must be finite")
    z = s / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def kl_divergence(p, q, tol=1e-9):
    """KL(p || q) in nats, with 0 * log(0 / q) taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    if abs(p.sum() - 1.0) > tol or abs(q.sum() - 1.0) > tol:
        raise ValueError("kl_divergence inputs must each sum to 1")
    if np.any(q <= 0) or np.any(p < 0):
        raise ValueError("q must be strictly positive and p non-negative")
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def mse(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("mse of empty vectors")
    d = pred - target
    return float(np.mean(d * d))


def param_hash(*mlps):
    """Hex digest over every parameter byte of the given networks."""
    h = hashlib.blake2b(digest_size=16)
    for mlp in mlps:
        for p in mlp.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()
