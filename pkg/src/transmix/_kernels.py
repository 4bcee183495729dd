"""Row-wise numeric kernels with a numba path and a pure-numpy path.

All kernels operate on C-contiguous 2-D arrays (rows x features). The numba
path is used when numba imports cleanly and ``TRANSMIX_NUMBA`` is not set to
``0``; the numpy path is always available and is what the tests pin against
when the flag is off.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _erf

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _numba_requested() -> bool:
    return os.environ.get("TRANSMIX_NUMBA", "1").strip().lower() not in {"0", "false", "no", "off"}


try:
    if not _numba_requested():
        raise ImportError("numba disabled by TRANSMIX_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------


def softmax_rows_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward_np(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layer_norm_np(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_backward_np(gy, xhat, rstd, gamma):
    gxhat = gy * gamma
    a = gxhat.mean(axis=1, keepdims=True)
    b = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = (gxhat - a - xhat * b) * rstd[:, None]
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    return gx, ggamma, gbeta


def gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + _erf(x * _SQRT1_2))


def gelu_backward_np(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + _erf(x * _SQRT1_2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return gy * (cdf + x * pdf)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _softmax_rows_nb(x):
        m, n = x.shape
        out = np.empty_like(x)
        for i in range(m):
            mx = x[i, 0]
            for j in range(1, n):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(n):
                e = math.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(n):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def _softmax_rows_backward_nb(y, gy):
        m, n = y.shape
        out = np.empty_like(y)
        for i in range(m):
            dot = 0.0
            for j in range(n):
                dot += gy[i, j] * y[i, j]
            for j in range(n):
                out[i, j] = y[i, j] * (gy[i, j] - dot)
        return out

    @njit(cache=True)
    def _layer_norm_nb(x, gamma, beta, eps):
        m, n = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(m, dtype=x.dtype)
        for i in range(m):
            mean = 0.0
            for j in range(n):
                mean += x[i, j]
            mean /= n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mean
                var += d * d
            var /= n
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(n):
                h = (x[i, j] - mean) * r
                xhat[i, j] = h
                out[i, j] = h * gamma[j] + beta[j]
        return out, xhat, rstd

    @njit(cache=True)
    def _layer_norm_backward_nb(gy, xhat, rstd, gamma):
        m, n = xhat.shape
        gx = np.empty_like(xhat)
        ggamma = np.zeros(n, dtype=xhat.dtype)
        gbeta = np.zeros(n, dtype=xhat.dtype)
        for i in range(m):
            a = 0.0
            b = 0.0
            for j in range(n):
                g = gy[i, j] * gamma[j]
                a += g
                b += g * xhat[i, j]
                ggamma[j] += gy[i, j] * xhat[i, j]
                gbeta[j] += gy[i, j]
            a /= n
            b /= n
            for j in range(n):
                gx[i, j] = (gy[i, j] * gamma[j] - a - xhat[i, j] * b) * rstd[i]
        return gx, ggamma, gbeta

    @njit(cache=True)
    def _gelu_nb(x):
        m, n = x.shape
        out = np.empty_like(x)
        for i in range(m):
            for j in range(n):
                v = x[i, j]
                out[i, j] = 0.5 * v * (1.0 + math.erf(v * _SQRT1_2))
        return out

    @njit(cache=True)
    def _gelu_backward_nb(x, gy):
        m, n = x.shape
        out = np.empty_like(x)
        for i in range(m):
            for j in range(n):
                v = x[i, j]
                cdf = 0.5 * (1.0 + math.erf(v * _SQRT1_2))
                pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
                out[i, j] = gy[i, j] * (cdf + v * pdf)
        return out


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def use_numba() -> bool:
    return HAS_NUMBA


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    x2 = _rows(x)
    out = _softmax_rows_nb(x2) if HAS_NUMBA else softmax_rows_np(x2)
    return out.reshape(x.shape)


def softmax_rows_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    y2, g2 = _rows(y), _rows(gy)
    out = _softmax_rows_backward_nb(y2, g2) if HAS_NUMBA else softmax_rows_backward_np(y2, g2)
    return out.reshape(y.shape)


def layer_norm(x, gamma, beta, eps):
    """Returns (out, xhat, rstd); xhat and rstd are cached for backward."""
    x2 = _rows(x)
    eps = x2.dtype.type(eps)
    if HAS_NUMBA:
        out, xhat, rstd = _layer_norm_nb(x2, gamma, beta, eps)
    else:
        out, xhat, rstd = layer_norm_np(x2, gamma, beta, eps)
    return out.reshape(x.shape), xhat, rstd


def layer_norm_backward(gy, xhat, rstd, gamma):
    g2 = _rows(gy)
    if HAS_NUMBA:
        gx, ggamma, gbeta = _layer_norm_backward_nb(g2, xhat, rstd, gamma)
    else:
        gx, ggamma, gbeta = layer_norm_backward_np(g2, xhat, rstd, gamma)
    return gx.reshape(gy.shape), ggamma, gbeta


def gelu(x: np.ndarray) -> np.ndarray:
    x2 = _rows(x)
    out = _gelu_nb(x2) if HAS_NUMBA else gelu_np(x2)
    return out.reshape(x.shape)


def gelu_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    x2, g2 = _rows(x), _rows(gy)
    out = _gelu_backward_nb(x2, g2) if HAS_NUMBA else gelu_backward_np(x2, g2)
    return out.reshape(x.shape)
