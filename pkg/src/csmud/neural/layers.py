"""Layer primitives with explicit forward and backward passes.

Arrays are batch-major: ``(batch, features)``. The functional forms
(``dense_forward`` etc.) are what the gradient checks exercise; the layer
classes wrap them with parameter storage and a cache for backprop.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

LAYER_KINDS = ("dense", "batch_norm", "relu", "block_activation", "residual_begin",
               "residual_add", "block_max_pool")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int
    block_size: int | None = None
    in_width: int | None = None  # dense only

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("block_activation", "block_max_pool"):
            if not self.block_size or self.block_size < 1:
                raise ValueError(f"{self.kind} needs block_size >= 1")
        if self.kind == "block_activation" and self.width % self.block_size:
            raise ValueError("block_activation width must be a multiple of block_size")
        if self.kind == "dense" and not self.in_width:
            raise ValueError("dense layer needs in_width")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


# --- functional forms -------------------------------------------------------

def featurize(y) -> np.ndarray:
    """Complex measurements -> real features ``[Re y, Im y]`` along the last axis."""
    y = np.asarray(y)
    return np.concatenate([y.real, y.imag], axis=-1)


def dense_forward(W, b, x):
    return x @ W.T + b


def dense_backward(W, x, g):
    """Returns ``(dx, dW, db)`` for upstream gradient ``g``."""
    return g @ W, g.T @ x, g.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, g):
    return np.where(x > 0, g, 0).astype(g.dtype, copy=False)


def _check_blocks(width, L):
    if width % L:
        raise ValueError(f"width {width} is not divisible by block size {L}")


def block_activation_forward(x, L):
    """Whole block passes if any element is > 0, else the block is zeroed.

    Returns ``(out, mask)`` with one boolean per block.
    """
    _check_blocks(x.shape[1], L)
    return kernels.block_activation_forward(np.ascontiguousarray(x), L)


def block_activation_backward(g, mask, L):
    return kernels.block_activation_backward(np.ascontiguousarray(g), mask, L)


def block_max_pool_forward(x, L):
    """Max over each block; also returns the absolute argmax column per block."""
    _check_blocks(x.shape[1], L)
    return kernels.block_max_pool_forward(np.ascontiguousarray(x), L)


def block_max_pool_backward(g, idx, width):
    return kernels.block_max_pool_backward(np.ascontiguousarray(g), idx, width)


def batch_norm_forward(x, gamma, beta, running_mean=None, running_var=None, training=True):
    """Returns ``(out, cache)``; ``cache`` is None in inference mode."""
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch norm in training mode needs at least 2 samples")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * inv
        return gamma * xhat + beta, (xhat, inv, mu, var)
    scale = gamma / np.sqrt(running_var + BN_EPS)
    return x * scale + (beta - running_mean * scale), None


def batch_norm_backward(g, gamma, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv = cache[0], cache[1]
    B = g.shape[0]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    dx = inv / B * (B * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def softmax(scores):
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(scores):
    z = scores - scores.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(scores, target):
    """Mean over the batch of ``-sum(target * log softmax(scores))``.

    Returns ``(loss, dscores)``; gradient is ``(softmax - target) / batch``.
    """
    scores = np.atleast_2d(scores)
    target = np.atleast_2d(target)
    if np.any(target < 0) or not np.allclose(target.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError("target rows must be nonnegative and sum to 1")
    B = scores.shape[0]
    loss = -(target * log_softmax(scores)).sum() / B
    return float(loss), (softmax(scores) - target) / B


def sigmoid_cross_entropy(scores, target):
    """Per-user binary cross-entropy (multi-label alternative head)."""
    scores = np.atleast_2d(scores)
    target = np.atleast_2d(target)
    if np.any((target < 0) | (target > 1)):
        raise ValueError("sigmoid targets must lie in [0, 1]")
    B = scores.shape[0]
    loss = (np.maximum(scores, 0) - scores * target + np.log1p(np.exp(-np.abs(scores)))).sum() / B
    p = 0.5 * (1 + np.tanh(0.5 * scores))
    return float(loss), (p - target) / B


# --- layer objects ------------------------------------------------------------

class Layer:
    """Base: parameter-free identity."""

    spec: LayerSpec
    param_names: tuple = ()
    buffer_names: tuple = ()

    def forward(self, x, training):
        return x

    def backward(self, g):
        return g

    def params(self):
        return [getattr(self, n) for n in self.param_names]

    def grads(self):
        return [getattr(self, "d" + n) for n in self.param_names]


class Dense(Layer):
    param_names = ("W", "b")

    def __init__(self, spec, rng, dtype):
        self.spec = spec
        fan_in = spec.in_width
        self.W = (rng.standard_normal((spec.width, fan_in)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.b = np.zeros(spec.width, dtype=dtype)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)

    def forward(self, x, training):
        self._x = x
        return dense_forward(self.W, self.b, x)

    def backward(self, g):
        dx, self.dW, self.db = dense_backward(self.W, self._x, g)
        return dx


class BatchNorm(Layer):
    param_names = ("gamma", "beta")
    buffer_names = ("running_mean", "running_var")

    def __init__(self, spec, dtype):
        self.spec = spec
        w = spec.width
        self.gamma = np.ones(w, dtype=dtype)
        self.beta = np.zeros(w, dtype=dtype)
        self.running_mean = np.zeros(w, dtype=dtype)
        self.running_var = np.ones(w, dtype=dtype)
        self.dgamma = np.zeros_like(self.gamma)
        self.dbeta = np.zeros_like(self.beta)

    def forward(self, x, training):
        out, self._cache = batch_norm_forward(x, self.gamma, self.beta, self.running_mean,
                                              self.running_var, training)
        if training:
            _, _, mu, var = self._cache
            m = BN_MOMENTUM
            self.running_mean = (m * self.running_mean + (1 - m) * mu).astype(self.gamma.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(self.gamma.dtype)
        return out

    def backward(self, g):
        dx, self.dgamma, self.dbeta = batch_norm_backward(g, self.gamma, self._cache)
        return dx


class ReLU(Layer):
    def __init__(self, spec):
        self.spec = spec

    def forward(self, x, training):
        self._x = x
        return relu_forward(x)

    def backward(self, g):
        return relu_backward(self._x, g)


class BlockActivation(Layer):
    def __init__(self, spec):
        self.spec = spec

    def forward(self, x, training):
        out, self._mask = block_activation_forward(x, self.spec.block_size)
        return out

    def backward(self, g):
        return block_activation_backward(g, self._mask, self.spec.block_size)


class BlockMaxPool(Layer):
    def __init__(self, spec):
        self.spec = spec

    def forward(self, x, training):
        self._w = x.shape[1]
        out, self._idx = block_max_pool_forward(x, self.spec.block_size)
        return out

    def backward(self, g):
        return block_max_pool_backward(g, self._idx, self._w)


class ResidualBegin(Layer):
    def __init__(self, spec):
        self.spec = spec


class ResidualAdd(Layer):
    def __init__(self, spec):
        self.spec = spec
