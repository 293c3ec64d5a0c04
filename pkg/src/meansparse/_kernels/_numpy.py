"""Pure-numpy reference kernels.

Every function here has a twin in ``_numba`` with the same signature and the
same result up to floating-point rounding.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    """Unfold a padded N×C×H×W array into a (C*kh*kw, N*Ho*Wo) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols, shape, kh, kw, stride, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add patch columns back into ``shape``."""
    n, c, hp, wp = shape
    out = np.zeros(shape, dtype=cols.dtype)
    patches = cols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                patches[:, i, j].transpose(1, 0, 2, 3)
    return out


def sparsify_forward(x, center, thresh):
    """x is N×C×L. Returns (out, pass_mask) where blocked entries map to the center."""
    c = center.astype(x.dtype)[None, :, None]
    keep = np.abs(x - c) > thresh.astype(x.dtype)[None, :, None]
    out = np.where(keep, x, c).astype(x.dtype, copy=False)
    return out, keep


def channel_moments(x):
    """Per-channel (count, mean, M2) of an N×C×L array, two-pass."""
    n, ch, length = x.shape
    flat = x.transpose(1, 0, 2).reshape(ch, n * length).astype(np.float64)
    mean = flat.mean(axis=1)
    m2 = ((flat - mean[:, None]) ** 2).sum(axis=1)
    return n * length, mean, m2


def hard_threshold(v, thr):
    return np.where(np.abs(v) > thr, v, 0.0).astype(v.dtype, copy=False)
