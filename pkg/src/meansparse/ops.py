"""Differentiable operations on :class:`~meansparse.tensor.Tensor`.

Broadcasting is limited to scalar-tensor pairs (a Python number or a 0-d
tensor against anything); channel-wise combinations go through the dedicated
``bias_add`` and batch-norm ops.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from . import _kernels
from .errors import ParameterDomainError, ShapeError
from .tensor import Tensor

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_pair(op, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape)


def _sigmoid(x):
    # split branches so neither exp overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- elementwise
def add(a, b):
    if not isinstance(b, Tensor):
        return Tensor._make(a.data + b, (a,), lambda g: (g,), "add")
    a = _as_tensor(a, b)
    _check_pair("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    if not isinstance(b, Tensor):
        return Tensor._make(a.data - b, (a,), lambda g: (g,), "sub")
    _check_pair("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def neg(a):
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    if not isinstance(b, Tensor):
        return Tensor._make(a.data * b, (a,), lambda g: (g * b,), "mul")
    _check_pair("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                        "mul")


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return Tensor._make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def bias_add(x, b):
    """Add a per-channel vector along axis 1 of an N×C[×...] tensor."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError("bias_add", x.shape, b.shape)
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return Tensor._make(x.data + b.data.reshape(view), (x, b),
                        lambda g: (g, g.sum(axis=axes)), "bias_add")


# ---------------------------------------------------------------- reductions
def sum(x, axis=None):  # noqa: A001
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis))

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(out, (x,), back, "sum")


def mean(x, axis=None):
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))
    out = np.asarray(x.data.mean(axis=axis))

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Tensor._make(out, (x,), back, "mean")


def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return Tensor._make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x):
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------- activations
def relu(x):
    mask = x.data > 0
    return Tensor._make(np.maximum(x.data, 0).astype(x.dtype, copy=False), (x,),
                        lambda g: (g * mask,), "relu")


def elu(x):
    xd = x.data
    ex = np.exp(np.minimum(xd, 0.0))
    pos = xd > 0
    out = np.where(pos, xd, ex - 1.0).astype(x.dtype, copy=False)
    return Tensor._make(out, (x,), lambda g: (g * np.where(pos, 1.0, ex),), "elu")


def gelu(x):
    """Exact GELU, x·Φ(x) with Φ the standard normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return Tensor._make((xd * cdf).astype(x.dtype, copy=False), (x,),
                        lambda g: (g * (cdf + xd * pdf),), "gelu")


def sigmoid(x):
    s = _sigmoid(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x):
    xd = x.data
    s = _sigmoid(xd)
    return Tensor._make(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),), "silu")


def psilu(x, beta):
    """x·sigmoid(β x) with scalar learnable β > 0."""
    b = float(beta.data)
    if not b > 0:
        raise ParameterDomainError(f"psilu requires beta > 0, got {b}")
    xd = x.data
    s = _sigmoid(b * xd)
    ds = s * (1.0 - s)

    def back(g):
        return g * (s + b * xd * ds), np.asarray((g * xd * xd * ds).sum()).reshape(beta.shape)

    return Tensor._make(xd * s, (x, beta), back, "psilu")


def pssilu(x, beta, shift):
    """x·(sigmoid(β x) − a)/(1 − a) with β > 0 and shift a ∈ [0, 1)."""
    b = float(beta.data)
    a = float(shift.data)
    if not b > 0:
        raise ParameterDomainError(f"pssilu requires beta > 0, got {b}")
    if not 0.0 <= a < 1.0:
        raise ParameterDomainError(f"pssilu requires shift in [0, 1), got {a}")
    xd = x.data
    s = _sigmoid(b * xd)
    ds = s * (1.0 - s)
    inv = 1.0 / (1.0 - a)

    def back(g):
        gx = g * (s + b * xd * ds - a) * inv
        gb = np.asarray((g * xd * xd * ds).sum() * inv).reshape(beta.shape)
        ga = np.asarray((g * xd * (s - 1.0)).sum() * inv * inv).reshape(shift.shape)
        return gx, gb, ga

    return Tensor._make(xd * (s - a) * inv, (x, beta, shift), back, "pssilu")


# ------------------------------------------------------------ softmax & losses
def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    sh = z - m
    return sh - np.log(np.exp(sh).sum(axis=-1, keepdims=True))


def softmax(x):
    p = np.exp(_log_softmax(x.data))

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._make(p, (x,), back, "softmax")


def log_softmax(x):
    ls = _log_softmax(x.data)
    p = np.exp(ls)
    return Tensor._make(ls, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),),
                        "log_softmax")


def _reduce(per, reduction):
    if reduction == "none":
        return per, np.ones_like(per)
    if reduction == "sum":
        return np.asarray(per.sum()), None
    if reduction == "mean":
        return np.asarray(per.mean()), 1.0 / per.shape[0]
    raise ValueError(f"unknown reduction {reduction!r}")


def cross_entropy(logits, target, reduction="mean"):
    """Softmax cross-entropy of N×K logits against integer labels."""
    target = np.asarray(target, dtype=np.int64)
    if logits.ndim != 2 or target.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, target.shape)
    ls = _log_softmax(logits.data)
    rows = np.arange(len(target))
    per = -ls[rows, target]
    out, scale = _reduce(per, reduction)

    def back(g):
        d = np.exp(ls)
        d[rows, target] -= 1.0
        w = g[:, None] if reduction == "none" else g * (1.0 if scale is None else scale)
        return (d * w,)

    return Tensor._make(out.astype(logits.dtype, copy=False), (logits,), back, "cross_entropy")


def kl_div(p_logits, q_logits, reduction="mean"):
    """KL(softmax(p) ‖ softmax(q)) per row of N×K logits."""
    if p_logits.shape != q_logits.shape or p_logits.ndim != 2:
        raise ShapeError("kl_div", p_logits.shape, q_logits.shape)
    lp = _log_softmax(p_logits.data)
    lq = _log_softmax(q_logits.data)
    p = np.exp(lp)
    q = np.exp(lq)
    per = (p * (lp - lq)).sum(axis=1)
    out, scale = _reduce(per, reduction)

    def back(g):
        w = g[:, None] if reduction == "none" else g * (1.0 if scale is None else scale)
        gp = p * ((lp - lq) - per[:, None]) * w
        gq = (q - p) * w
        return gp, gq

    return Tensor._make(out.astype(p_logits.dtype, copy=False), (p_logits, q_logits), back,
                        "kl_div")


# ---------------------------------------------------------------- convolution
def conv2d(x, w, stride=1, padding=0):
    """2-D cross-correlation of N×C×H×W input with O×C×kh×kw filters."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", x.shape, w.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = _kernels.im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    def back(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ gmat
            gxp = _kernels.col2im(gcols, (n, c, hp, wp), kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    return Tensor._make(out, (x, w), back, "conv2d")


def avg_pool2d(x, k):
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError("avg_pool2d", x.shape, (k, k))
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def back(g):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (up / (k * k),)

    return Tensor._make(out, (x,), back, "avg_pool2d")


def global_avg_pool(x):
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return Tensor._make(out, (x,),
                        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
                        "global_avg_pool")


# ---------------------------------------------------------------- batch norm
def batch_norm_train(x, gamma, beta, eps):
    """Normalise with batch statistics over all axes but 1.

    Returns ``(out, batch_mean, batch_var)``; the variance is the biased one.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    view = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    m = xd.mean(axis=axes)
    v = xd.var(axis=axes)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (xd - m.reshape(view)) * inv.reshape(view)
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)
    count = xd.size // xd.shape[1]

    def back(g):
        gb = g.sum(axis=axes)
        gg = (g * xhat).sum(axis=axes)
        dxhat = g * gamma.data.reshape(view)
        gx = (inv.reshape(view) / count) * (
            count * dxhat
            - dxhat.sum(axis=axes).reshape(view)
            - xhat * (dxhat * xhat).sum(axis=axes).reshape(view)
        )
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), back, "batch_norm"), m, v


def batch_norm_eval(x, gamma, beta, mean, var, eps):
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(view)) * inv.reshape(view)
    scale = (gamma.data * inv).reshape(view).astype(x.dtype, copy=False)
    out = (gamma.data.reshape(view) * xhat + beta.data.reshape(view)).astype(x.dtype, copy=False)

    def back(g):
        return g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._make(out, (x, gamma, beta), back, "batch_norm")


def channel_affine(x, scale, shift):
    """Fixed per-channel x·scale + shift (numpy constants, no parameter grads)."""
    view = (1, -1) + (1,) * (x.ndim - 2)
    s = np.asarray(scale, dtype=x.dtype).reshape(view)
    out = x.data * s + np.asarray(shift, dtype=x.dtype).reshape(view)
    return Tensor._make(out, (x,), lambda g: (g * s,), "channel_affine")
