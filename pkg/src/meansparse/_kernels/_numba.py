"""numba-compiled kernels. Loops are serial so results never depend on scheduling."""

import numpy as np
from numba import njit


@njit(cache=True)
def _im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c * kh * kw, n * ho * wo), dtype=xp.dtype)
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                k = (ch * kh + i) * kw + j
                for b in range(n):
                    for oy in range(ho):
                        base = (b * ho + oy) * wo
                        y = oy * stride + i
                        for ox in range(wo):
                            cols[k, base + ox] = xp[b, ch, y, ox * stride + j]
    return cols


def im2col(xp, kh, kw, stride):
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    return _im2col(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)


@njit(cache=True)
def _col2im(cols, out, kh, kw, stride, ho, wo):
    n, c = out.shape[0], out.shape[1]
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    k = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        base = (b * ho + oy) * wo
                        y = oy * stride + i
                        for ox in range(wo):
                            out[b, ch, y, ox * stride + j] += cols[k, base + ox]
    return out


def col2im(cols, shape, kh, kw, stride, ho, wo):
    out = np.zeros(shape, dtype=cols.dtype)
    return _col2im(np.ascontiguousarray(cols), out, kh, kw, stride, ho, wo)


@njit(cache=True)
def _sparsify_forward(x, center, thresh, out, keep):
    n, c, length = x.shape
    for b in range(n):
        for ch in range(c):
            mu = center[ch]
            th = thresh[ch]
            for i in range(length):
                v = x[b, ch, i]
                if abs(v - mu) > th:
                    out[b, ch, i] = v
                    keep[b, ch, i] = True
                else:
                    out[b, ch, i] = mu
                    keep[b, ch, i] = False


def sparsify_forward(x, center, thresh):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    keep = np.empty(x.shape, dtype=np.bool_)
    _sparsify_forward(x, center.astype(x.dtype), thresh.astype(x.dtype), out, keep)
    return out, keep


@njit(cache=True)
def _channel_moments(x):
    n, c, length = x.shape
    cnt = n * length
    mean = np.zeros(c)
    m2 = np.zeros(c)
    for ch in range(c):
        s = 0.0
        for b in range(n):
            for i in range(length):
                s += np.float64(x[b, ch, i])
        m = s / cnt
        q = 0.0
        for b in range(n):
            for i in range(length):
                d = np.float64(x[b, ch, i]) - m
                q += d * d
        mean[ch] = m
        m2[ch] = q
    return mean, m2


def channel_moments(x):
    """Per-channel (count, mean, M2), two passes in float64."""
    mean, m2 = _channel_moments(np.ascontiguousarray(x))
    return x.shape[0] * x.shape[2], mean, m2


@njit(cache=True)
def _hard_threshold(v, thr, out):
    for i in range(v.size):
        out[i] = v[i] if abs(v[i]) > thr else 0.0


def hard_threshold(v, thr):
    v = np.ascontiguousarray(v)
    out = np.empty_like(v)
    _hard_threshold(v.reshape(-1), float(thr), out.reshape(-1))
    return out
