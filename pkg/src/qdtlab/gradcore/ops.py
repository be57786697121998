"""Differentiable primitives.

Broadcasting is limited to adding a trailing-shape operand (a bias, a mask)
over the leading axes of the other operand, and to multiplying a batched
left operand by a 2-D right operand.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import numba

from .tensor import DimensionError, ContractError, Tensor, as_tensor, make_result

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
LAYER_NORM_EPS = 1e-5


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back over its leading axes."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    if a.ndim < b.ndim:
        raise DimensionError("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(B, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if B.ndim == 2 and A.ndim > 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(A, -1, -2), g)
        return ga, gb

    return make_result("matmul", np.matmul(A, B), (a, b), backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError("transpose", a.shape)
    return make_result("transpose", np.swapaxes(a.data, -1, -2), (a,),
                       lambda g: (np.swapaxes(g, -1, -2),))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError("permute", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return make_result("permute", np.transpose(a.data, axes), (a,),
                       lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError("reshape", a.shape, tuple(shape)) from None
    src = a.shape
    return make_result("reshape", out, (a,), lambda g: (g.reshape(src),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < b.ndim:
        a, b = b, a
    if a.shape[a.ndim - b.ndim:] != b.shape:
        raise DimensionError("add", a.shape, b.shape)
    bshape = b.shape

    def backward(g):
        return g, _sum_to(g, bshape)

    return make_result("add", a.data + b.data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    """Multiply by a plain real scalar."""
    if isinstance(c, Tensor) or np.ndim(c) != 0:
        raise DimensionError("scale", as_tensor(a).shape, np.shape(getattr(c, "data", c)))
    a = as_tensor(a)
    c = float(c)
    return make_result("scale", a.data * c, (a,), lambda g: (g * c,))


def weighted_sum(xs: Sequence[Tensor], w) -> Tensor:
    """Return sum_i w[i] * xs[i] for a weight vector ``w`` of length len(xs)."""
    w = as_tensor(w)
    xs = [as_tensor(x) for x in xs]
    if w.ndim != 1 or w.shape[0] != len(xs) or not xs:
        raise DimensionError("weighted_sum", w.shape, *(x.shape for x in xs))
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise DimensionError("weighted_sum", *(x.shape for x in xs))
    W = w.data
    datas = [x.data for x in xs]
    out = W[0] * datas[0]
    for wi, xi in zip(W[1:], datas[1:]):
        out = out + wi * xi

    def backward(g):
        gw = np.array([np.vdot(g, xi) for xi in datas]) if w.requires_grad else None
        gx = [g * wi if x.requires_grad else None for wi, x in zip(W, xs)]
        return (*gx, gw)

    return make_result("weighted_sum", out, (*xs, w), backward)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise DimensionError("softmax", a.shape)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result("softmax", y, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis, then apply the learnable affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layer_norm", x.shape, gamma.shape, beta.shape)
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data
    out = xhat * G + beta.data

    def backward(g):
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * G
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result("layer_norm", out, (x, gamma, beta), backward)


@numba.njit(cache=True)
def _gelu_kernel(x, y, dy):
    xf, yf, df = x.ravel(), y.ravel(), dy.ravel()
    for i in range(xf.size):
        v = xf[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        yf[i] = v * cdf
        df[i] = cdf + v * _INV_SQRT_2PI * math.exp(-0.5 * v * v)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF."""
    a = as_tensor(a)
    X = np.ascontiguousarray(a.data)
    y = np.empty_like(X)
    dy = np.empty_like(X)
    _gelu_kernel(X, y, dy)
    return make_result("gelu", y, (a,), lambda g: (g * dy,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return make_result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def embedding(table, indices) -> Tensor:
    """Gather rows of a [V, d] table; output shape is indices.shape + (d,)."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if table.ndim != 2 or not np.issubdtype(idx.dtype, np.integer):
        raise DimensionError("embedding", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: index out of range [0, {table.shape[0]}) "
            f"(got min {idx.min()}, max {idx.max()})")
    V, d = table.shape

    def backward(g):
        gt = np.zeros((V, d))
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return make_result("embedding", table.data[idx], (table,), backward)


def take(a, indices, axis: int) -> Tensor:
    """Select entries along ``axis`` (slicing along the sequence axis)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    n = a.shape[ax]
    if idx.ndim != 1 or (idx.size and (idx.min() < -n or idx.max() >= n)):
        raise DimensionError("take", a.shape, idx.shape)
    src = a.shape

    def backward(g):
        ga = np.zeros(src)
        sl = [slice(None)] * len(src)
        sl[ax] = idx
        np.add.at(ga, tuple(sl), g)
        return (ga,)

    return make_result("take", np.take(a.data, idx, axis=ax), (a,), backward)


def concat(xs: Sequence, axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat")
    ax = axis % xs[0].ndim
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or x.shape[:ax] + x.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise DimensionError("concat", *(x.shape for x in xs))
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result("concat", np.concatenate([x.data for x in xs], axis=ax), xs, backward)


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    src = a.shape
    return make_result("sum", np.asarray(a.data.sum()), (a,),
                       lambda g: (np.full(src, float(g)),))


def mse(pred, target, mask=None) -> Tensor:
    """Mean over rows of the squared Euclidean error along the last axis.

    ``mask`` (shape pred.shape[:-1]) drops rows from numerator and denominator.
    """
    pred = as_tensor(pred)
    T = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if T.shape != pred.shape or pred.ndim < 1:
        raise DimensionError("mse", pred.shape, T.shape)
    if mask is None:
        M = np.ones(pred.shape[:-1])
    else:
        M = np.asarray(mask, dtype=np.float64)
        if M.shape != pred.shape[:-1]:
            raise DimensionError("mse", pred.shape, M.shape)
    n = M.sum()
    if n <= 0:
        raise ContractError("mse: no valid rows to average over")
    diff = (pred.data - T) * M[..., None]
    val = np.asarray((diff * diff).sum() / n)

    def backward(g):
        return (float(g) * 2.0 * diff / n,)

    return make_result("mse", val, (pred,), backward)


def linear(x, W, b=None) -> Tensor:
    """x @ W^T + b with W stored as [out, in]; fused matmul, transpose and bias add."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.ndim < 1 or x.shape[-1] != W.shape[1]:
        raise DimensionError("linear", x.shape, W.shape)
    inputs = [x, W]
    out = x.data @ W.data.T
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise DimensionError("linear", x.shape, W.shape, b.shape)
        out += b.data
        inputs.append(b)
    X, Wd = x.data, W.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wd if x.requires_grad else None
        gW = g2.T @ X.reshape(-1, X.shape[-1]) if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, (g2.sum(axis=0) if b.requires_grad else None)

    return make_result("linear", out, inputs, backward)
