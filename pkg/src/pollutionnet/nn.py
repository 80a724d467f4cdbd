"""Forward/backward pairs for the handful of dense ops the transformer needs.

Every op ``f(...)`` returns ``(out, cache)`` and has a matching
``f_backward(dout, cache)`` returning gradients with respect to its inputs.
Arrays are float64 numpy arrays; leading axes are treated as batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    pass


class Parameter:
    """A named trainable array with an accumulated gradient."""

    def __init__(self, name: str, data):
        self.name = name
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def matmul(A, B):
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {A.shape} and {B.shape}")
    return np.matmul(A, B), (A, B)


def matmul_backward(dC, cache):
    A, B = cache
    dA = np.matmul(dC, np.swapaxes(B, -1, -2))
    dB = np.matmul(np.swapaxes(A, -1, -2), dC)
    return _unbroadcast(dA, A.shape), _unbroadcast(dB, B.shape)


def add(A, B):
    try:
        out = A + B
    except ValueError:
        raise ShapeError(f"cannot add shapes {np.shape(A)} and {np.shape(B)}") from None
    return out, (np.shape(A), np.shape(B))


def add_backward(dout, cache):
    sa, sb = cache
    return _unbroadcast(dout, sa), _unbroadcast(dout, sb)


def scale(X, s: float):
    return X * s, s


def scale_backward(dout, cache):
    return dout * cache


def transpose(X):
    """Swap the last two axes."""
    if X.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got shape {X.shape}")
    return np.swapaxes(X, -1, -2), None


def transpose_backward(dout, cache=None):
    return np.swapaxes(dout, -1, -2)


def concat_last_axis(arrays):
    lead = {a.shape[:-1] for a in arrays}
    if len(lead) != 1:
        raise ShapeError(f"leading shapes differ: {[a.shape for a in arrays]}")
    return np.concatenate(arrays, axis=-1), [a.shape[-1] for a in arrays]


def concat_last_axis_backward(dout, cache):
    return np.split(dout, np.cumsum(cache)[:-1], axis=-1)


def split_last_axis(X, parts: int):
    if X.shape[-1] % parts:
        raise ShapeError(f"last axis {X.shape[-1]} not divisible into {parts} parts")
    return np.split(X, parts, axis=-1), parts


def split_last_axis_backward(douts, cache=None):
    return np.concatenate(douts, axis=-1)


def softmax_rows(X):
    """Softmax over the last axis, max-shifted for overflow safety."""
    Z = X - X.max(axis=-1, keepdims=True)
    E = np.exp(Z)
    Y = E / E.sum(axis=-1, keepdims=True)
    return Y, Y


def softmax_rows_backward(dY, Y):
    return Y * (dY - (dY * Y).sum(axis=-1, keepdims=True))


def gelu(X):
    """Exact GELU, ``x * Phi(x)`` with the normal CDF from erf."""
    cdf = 0.5 * (1.0 + erf(X / _SQRT2))
    return X * cdf, (X, cdf)


def gelu_backward(dout, cache):
    X, cdf = cache
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * X * X)
    return dout * (cdf + X * pdf)


def layer_norm(X, gain, bias, eps: float = LN_EPS):
    d = X.shape[-1]
    if np.shape(gain) != (d,) or np.shape(bias) != (d,):
        raise ShapeError(f"gain/bias shapes {np.shape(gain)}, {np.shape(bias)} do not match last axis {d}")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dout, cache):
    xhat, inv, gain = cache
    lead = tuple(range(dout.ndim - 1))
    dgain = (dout * xhat).sum(axis=lead)
    dbias = dout.sum(axis=lead)
    dxhat = dout * gain
    dX = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dX, dgain, dbias


@dataclass
class MSECache:
    diff: np.ndarray
    mask: np.ndarray
    count: int
    empty: bool


def mse_masked(pred, target, mask):
    """Mean squared error over cells where ``mask`` is true.

    An all-invalid mask yields a loss of 0 and ``cache.empty == True``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not (pred.shape == target.shape == mask.shape):
        raise ShapeError(f"shapes differ: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    count = int(mask.sum())
    diff = np.where(mask, pred - np.where(mask, target, 0.0), 0.0)
    if count == 0:
        return 0.0, MSECache(diff, mask, 0, True)
    return float((diff * diff).sum() / count), MSECache(diff, mask, count, False)


def mse_masked_backward(dloss, cache: MSECache):
    if cache.empty:
        return np.zeros_like(cache.diff)
    return dloss * 2.0 * cache.diff / cache.count
