"""Hot numeric kernels with a numba path and a pure-numpy path.

The public functions here pick the backend from ``_accel.HAS_NUMBA``. Both
paths compute the same mathematics; they may differ in the last float bits.
"""

import math

import numpy as np
from scipy import special

from ._accel import HAS_NUMBA, njit

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

CUBIC_A = -0.5


# --------------------------------------------------------------------------
# GELU (exact erf form)
# --------------------------------------------------------------------------

@njit
def _gelu_fwd_nb(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v / _SQRT2))
    return out.reshape(x.shape)


@njit
def _gelu_grad_nb(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        cdf = 0.5 * (1.0 + math.erf(v / _SQRT2))
        out[i] = cdf + v * _INV_SQRT_2PI * math.exp(-0.5 * v * v)
    return out.reshape(x.shape)


def _gelu_fwd_np(x):
    return 0.5 * x * (1.0 + special.erf(x / x.dtype.type(_SQRT2)))


def _gelu_grad_np(x):
    cdf = 0.5 * (1.0 + special.erf(x / x.dtype.type(_SQRT2)))
    return cdf + x * x.dtype.type(_INV_SQRT_2PI) * np.exp(-0.5 * x * x)


def gelu_forward(x):
    x = np.ascontiguousarray(x)
    if HAS_NUMBA:
        return _gelu_fwd_nb(x)
    return _gelu_fwd_np(x)


def gelu_grad(x):
    """d gelu / dx evaluated elementwise."""
    x = np.ascontiguousarray(x)
    if HAS_NUMBA:
        return _gelu_grad_nb(x)
    return _gelu_grad_np(x)


# --------------------------------------------------------------------------
# Bicubic (Catmull-Rom) resize, half-pixel centers, edge clamping
# --------------------------------------------------------------------------

@njit
def cubic_weight(t, a):
    t = abs(t)
    if t <= 1.0:
        return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    if t < 2.0:
        return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    return 0.0


@njit
def _resize_axis_nb(src, out_len, a):
    # resamples the last axis of a 2-D (rows x n) array
    rows, n = src.shape
    out = np.empty((rows, out_len), dtype=np.float64)
    scale = n / out_len
    for j in range(out_len):
        center = (j + 0.5) * scale - 0.5
        base = math.floor(center)
        frac = center - base
        w0 = cubic_weight(frac + 1.0, a)
        w1 = cubic_weight(frac, a)
        w2 = cubic_weight(1.0 - frac, a)
        w3 = cubic_weight(2.0 - frac, a)
        i0 = min(max(base - 1, 0), n - 1)
        i1 = min(max(base, 0), n - 1)
        i2 = min(max(base + 1, 0), n - 1)
        i3 = min(max(base + 2, 0), n - 1)
        for r in range(rows):
            out[r, j] = w0 * src[r, i0] + w1 * src[r, i1] + w2 * src[r, i2] + w3 * src[r, i3]
    return out


def _resize_nb(img, out_h, out_w, a):
    c, h, w = img.shape
    out = np.empty((c, out_h, out_w), dtype=np.float64)
    for ch in range(c):
        tmp = _resize_axis_nb(img[ch], out_w, a)                    # h x out_w
        out[ch] = _resize_axis_nb(np.ascontiguousarray(tmp.T), out_h, a).T
    return out


def cubic_matrix(n_in, n_out, a=CUBIC_A):
    """Dense (n_out x n_in) interpolation matrix with clamped edge taps."""
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(centers).astype(np.int64)
    frac = centers - base
    rows = np.arange(n_out)
    for k, dist in zip(range(-1, 3), (frac + 1.0, frac, 1.0 - frac, 2.0 - frac)):
        t = np.abs(dist)
        wk = np.where(
            t <= 1.0,
            ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0,
            np.where(t < 2.0, ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a, 0.0),
        )
        idx = np.clip(base + k, 0, n_in - 1)
        np.add.at(mat, (rows, idx), wk)
    return mat


def _resize_np(img, out_h, out_w, a):
    wy = cubic_matrix(img.shape[1], out_h, a)
    wx = cubic_matrix(img.shape[2], out_w, a)
    return np.matmul(np.matmul(wy, img), wx.T)


def resize_cubic_float(img, out_h, out_w, a=CUBIC_A):
    """Resample a C x H x W float64 array; no clamping or rounding."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    if HAS_NUMBA:
        return _resize_nb(img, int(out_h), int(out_w), float(a))
    return _resize_np(img, int(out_h), int(out_w), float(a))
