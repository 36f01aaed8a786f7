"""Dense numeric kernel: parameters, the fixed layer set with hand-written
backward passes, cross-entropy and AdamW.

Arrays are plain ``numpy.ndarray``. Training runs in float32; gradient checks
cast everything to float64. Every layer caches what its backward pass needs
during ``forward`` and raises :class:`StateError` if asked to go backwards
without one.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

from .errors import DimensionError, LabelError, StateError

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class Parameter:
    """A value with an accumulated gradient and a trainable flag.

    ``mask`` (optional, broadcastable to ``value``) restricts which entries the
    optimizer may change; a head whose inherited rows stay fixed uses it.
    """

    __slots__ = ("value", "grad", "trainable", "mask")

    def __init__(self, value: np.ndarray, trainable: bool = True, mask=None):
        self.value = value
        self.grad = np.zeros_like(value)
        self.trainable = trainable
        self.mask = mask

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def astype(self, dtype) -> "Parameter":
        mask = None if self.mask is None else self.mask.copy()
        return Parameter(self.value.astype(dtype, copy=True), self.trainable, mask)

    def __repr__(self):
        flag = "trainable" if self.trainable else "frozen"
        return f"Parameter(shape={self.value.shape}, dtype={self.value.dtype}, {flag})"


# --------------------------------------------------------------------------- #
# Stateless kernels
# --------------------------------------------------------------------------- #
def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def layer_norm(x: np.ndarray, gain: Parameter, bias: Parameter) -> np.ndarray:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer norm params {gain.shape}/{bias.shape} do not match width {x.shape[-1]}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain.value + bias.value


def cross_entropy(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``targets`` and its gradient w.r.t. logits."""
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise LabelError(f"expected {n} targets, got shape {targets.shape}")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise LabelError(f"target id out of range for {c} classes: {targets.tolist()}")
    logp = log_softmax_rows(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, targets].mean())
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    grad /= n
    return loss, grad


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


# --------------------------------------------------------------------------- #
# Layers
# --------------------------------------------------------------------------- #
class Layer:
    _cache = None

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a forward pass")
        return self._cache

    def parameters(self) -> list[Parameter]:
        return []


class Linear(Layer):
    """y = x W^T + b with W stored (d_out, d_in)."""

    def __init__(self, weight: Parameter, bias: Parameter):
        self.weight = weight
        self.bias = bias

    def forward(self, x):
        if x.shape[-1] != self.weight.shape[1]:
            raise DimensionError(f"input width {x.shape[-1]} vs weight {self.weight.shape}")
        self._cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dy):
        x = self._need_cache()
        if self.weight.trainable:
            self.weight.grad += dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        if self.bias.trainable:
            self.bias.grad += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        return dy @ self.weight.value

    def parameters(self):
        return [self.weight, self.bias]


class LoraLinear(Layer):
    """Frozen-able base projection plus a low-rank branch scaled by alpha/r.

    y = x W0^T + b + scaling * (x A^T) B^T, never materialising B A.
    """

    def __init__(self, base: Linear, a: Parameter, b: Parameter, scaling: float):
        d_out, d_in = base.weight.shape
        r = a.shape[0]
        if a.shape != (r, d_in) or b.shape != (d_out, r):
            raise DimensionError(
                f"LoRA factors A{a.shape} B{b.shape} do not fit base weight {base.weight.shape}"
            )
        self.base = base
        self.a = a
        self.b = b
        self.scaling = scaling

    def forward(self, x):
        y = self.base.forward(x)
        h = x @ self.a.value.T
        self._cache = (x, h)
        return y + self.scaling * (h @ self.b.value.T)

    def backward(self, dy):
        x, h = self._need_cache()
        dx = self.base.backward(dy)
        dy2 = dy.reshape(-1, dy.shape[-1])
        if self.b.trainable:
            self.b.grad += self.scaling * (dy2.T @ h.reshape(-1, h.shape[-1]))
        dh = self.scaling * (dy @ self.b.value)
        if self.a.trainable:
            self.a.grad += dh.reshape(-1, dh.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        return dx + dh @ self.a.value

    def parameters(self):
        return self.base.parameters() + [self.a, self.b]


class LayerNorm(Layer):
    def __init__(self, gain: Parameter, bias: Parameter):
        self.gain = gain
        self.bias = bias

    def forward(self, x):
        if self.gain.shape != (x.shape[-1],):
            raise DimensionError(f"layer norm width {self.gain.shape} vs input {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return xhat * self.gain.value + self.bias.value

    def backward(self, dy):
        xhat, inv = self._need_cache()
        if self.gain.trainable:
            self.gain.grad += (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        if self.bias.trainable:
            self.bias.grad += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        g = dy * self.gain.value
        n = xhat.shape[-1]
        return inv / n * (
            n * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True)
        )

    def parameters(self):
        return [self.gain, self.bias]


class Embedding(Layer):
    def __init__(self, table: Parameter):
        self.table = table

    def forward(self, ids):
        ids = np.asarray(ids)
        n = self.table.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise DimensionError(f"embedding index out of range [0, {n})")
        self._cache = ids
        return self.table.value[ids]

    def backward(self, dy):
        ids = self._need_cache()
        if self.table.trainable:
            np.add.at(self.table.grad, ids.ravel(), dy.reshape(-1, dy.shape[-1]))
        return None

    def parameters(self):
        return [self.table]


class GELU(Layer):
    def forward(self, x):
        self._cache = x
        return gelu(x)

    def backward(self, dy):
        x = self._need_cache()
        t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


class FeedForward(Layer):
    def __init__(self, fc1: Linear, fc2: Linear):
        self.fc1 = fc1
        self.act = GELU()
        self.fc2 = fc2

    def forward(self, x):
        self._cache = True
        return self.fc2.forward(self.act.forward(self.fc1.forward(x)))

    def backward(self, dy):
        self._need_cache()
        return self.fc1.backward(self.act.backward(self.fc2.backward(dy)))

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()


class MultiHeadAttention(Layer):
    """Scaled dot-product self-attention; ``mask`` marks valid key positions."""

    def __init__(self, q, k, v, o, n_heads: int):
        self.q, self.k, self.v, self.o = q, k, v, o
        self.n_heads = n_heads
        self.last_weights = None

    def _split(self, t):
        b, n, d = t.shape
        return t.reshape(b, n, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def forward(self, x, mask=None):
        bsz, n, d = x.shape
        dh = d // self.n_heads
        q = self._split(self.q.forward(x))
        k = self._split(self.k.forward(x))
        v = self._split(self.v.forward(x))
        scale = 1.0 / math.sqrt(dh)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        if mask is not None:
            scores = np.where(mask[:, None, None, :], scores, -np.inf)
        att = softmax_rows(scores)
        self.last_weights = att
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, n, d)
        self._cache = (q, k, v, att, scale)
        return self.o.forward(ctx)

    def backward(self, dy):
        q, k, v, att, scale = self._need_cache()
        bsz, h, n, dh = q.shape
        dctx = self._split(self.o.backward(dy))
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(bsz, n, h * dh)

        return self.q.backward(merge(dq)) + self.k.backward(merge(dk)) + self.v.backward(merge(dv))

    def parameters(self):
        return self.q.parameters() + self.k.parameters() + self.v.parameters() + self.o.parameters()


class ClsPool(Layer):
    """Pools a (batch, seq, d) activation to its first position."""

    def forward(self, x):
        self._cache = x.shape
        return x[:, 0, :]

    def backward(self, dy):
        shape = self._need_cache()
        dx = np.zeros(shape, dtype=dy.dtype)
        dx[:, 0, :] = dy
        return dx


# --------------------------------------------------------------------------- #
# Optimizer
# --------------------------------------------------------------------------- #
class AdamW:
    """AdamW with bias-corrected moments and decoupled weight decay.

    Frozen parameters are skipped entirely, whatever their gradient holds.
    """

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 2e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.trainable:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            update = self.lr * update
            if p.mask is not None:
                update = update * p.mask
            p.value -= update.astype(p.value.dtype, copy=False)


def central_difference(fn: Callable[[], float], array: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Numerical gradient of the scalar ``fn()`` w.r.t. ``array`` (mutated in place, restored)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad
