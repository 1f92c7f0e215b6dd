"""One-dimensional convolution kernels: numba fast path, pure-numpy fallback.

These three functions are the hot inner loops of training; everything else in
the package is ordinary vectorized numpy.  The active path is chosen once at
import from the ``SPKSTYLE_BACKEND`` environment variable:

* ``auto`` (default) -- numba when importable, numpy otherwise
* ``numba``          -- force the jitted kernels
* ``numpy``          -- force the im2col/BLAS fallback

``set_backend`` switches at runtime (used by the benchmark and tests).  Both
paths compute the same sums; they may differ in the last float bits because
accumulation order differs.  Within one path results are deterministic, which
is what the training reproducibility contract relies on.

Array layout is channels-last: activations ``(B, T, C)``, weights
``(K, C_in, C_out)``.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

ENV_VAR = "SPKSTYLE_BACKEND"

try:
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    HAS_NUMBA = False


def _resolve(name: str) -> str:
    if name == "auto":
        return "numba" if HAS_NUMBA else "numpy"
    if name == "numba" and not HAS_NUMBA:
        warnings.warn("numba requested but not importable; using numpy fallback")
        return "numpy"
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}; expected auto|numba|numpy")
    return name


_ACTIVE = _resolve(os.environ.get(ENV_VAR, "auto"))


def active_backend() -> str:
    """Name of the kernel path in use: ``"numba"`` or ``"numpy"``."""
    return _ACTIVE


def set_backend(name: str) -> str:
    """Select the kernel path at runtime; returns the resolved name."""
    global _ACTIVE
    _ACTIVE = _resolve(name)
    return _ACTIVE


def conv_out_len(t: int, kernel: int, stride: int, pad: int) -> int:
    return (t + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# numpy fallback: im2col + BLAS matmul
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    b, t, ci = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0))) if pad else x
    to = conv_out_len(t, kernel, stride, pad)
    cols = np.empty((b, to, kernel, ci), dtype=x.dtype)
    for k in range(kernel):
        cols[:, :, k, :] = xp[:, k : k + to * stride : stride, :]
    return cols


def _conv1d_forward_np(x, w, bias, stride, pad):
    k, ci, co = w.shape
    b, t, _ = x.shape
    to = conv_out_len(t, k, stride, pad)
    cols = _im2col(x, k, stride, pad)
    y = cols.reshape(b * to, k * ci) @ w.reshape(k * ci, co)
    y += bias
    return y.reshape(b, to, co)


def _conv1d_backward_input_np(gy, w, stride, pad, t_in):
    k, ci, co = w.shape
    b, to, _ = gy.shape
    gxp = np.zeros((b, t_in + 2 * pad, ci), dtype=gy.dtype)
    for kk in range(k):
        gxp[:, kk : kk + to * stride : stride, :] += gy @ w[kk].T
    return gxp[:, pad : pad + t_in, :] if pad else gxp


def _conv1d_backward_weight_np(x, gy, stride, pad, kernel):
    b, to, co = gy.shape
    ci = x.shape[2]
    cols = _im2col(x, kernel, stride, pad)
    gw = cols.reshape(b * to, kernel * ci).T @ gy.reshape(b * to, co)
    return gw.reshape(kernel, ci, co)


# ---------------------------------------------------------------------------
# numba fast path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv1d_forward_nb(x, w, bias, stride, pad, y):  # pragma: no cover
        b, t, ci = x.shape
        k, _, co = w.shape
        to = y.shape[1]
        for bi in prange(b):
            acc = np.empty(co, dtype=x.dtype)
            for tt in range(to):
                t0 = tt * stride - pad
                acc[:] = bias
                for kk in range(k):
                    ts = t0 + kk
                    if 0 <= ts < t:
                        for cc in range(ci):
                            xv = x[bi, ts, cc]
                            for oo in range(co):
                                acc[oo] += xv * w[kk, cc, oo]
                y[bi, tt] = acc
        return y

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv1d_backward_input_nb(gy, w, stride, pad, gx):  # pragma: no cover
        b, to, co = gy.shape
        k, ci, _ = w.shape
        t = gx.shape[1]
        for bi in prange(b):
            for tt in range(to):
                t0 = tt * stride - pad
                for kk in range(k):
                    ts = t0 + kk
                    if 0 <= ts < t:
                        for cc in range(ci):
                            acc = gx.dtype.type(0.0)
                            for oo in range(co):
                                acc += gy[bi, tt, oo] * w[kk, cc, oo]
                            gx[bi, ts, cc] += acc
        return gx

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv1d_backward_weight_nb(x, gy, stride, pad, gw):  # pragma: no cover
        b, t, ci = x.shape
        _, to, co = gy.shape
        k = gw.shape[0]
        for kc in prange(k * ci):
            kk = kc // ci
            cc = kc % ci
            row = np.zeros(co, dtype=x.dtype)
            for bi in range(b):
                for tt in range(to):
                    ts = tt * stride - pad + kk
                    if 0 <= ts < t:
                        xv = x[bi, ts, cc]
                        for oo in range(co):
                            row[oo] += xv * gy[bi, tt, oo]
            gw[kk, cc] = row
        return gw


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def conv1d_forward(x, w, bias, stride=1, pad=0):
    """Cross-correlate ``x (B,T,Ci)`` with ``w (K,Ci,Co)`` plus bias."""
    if _ACTIVE == "numba":
        b, t, _ = x.shape
        to = conv_out_len(t, w.shape[0], stride, pad)
        y = np.empty((b, to, w.shape[2]), dtype=x.dtype)
        return _conv1d_forward_nb(x, w, bias, stride, pad, y)
    return _conv1d_forward_np(x, w, bias, stride, pad)


def conv1d_backward_input(gy, w, stride, pad, t_in):
    """Gradient of the convolution output w.r.t. its input."""
    if _ACTIVE == "numba":
        gx = np.zeros((gy.shape[0], t_in, w.shape[1]), dtype=gy.dtype)
        return _conv1d_backward_input_nb(gy, w, stride, pad, gx)
    return _conv1d_backward_input_np(gy, w, stride, pad, t_in)


def conv1d_backward_weight(x, gy, stride, pad, kernel):
    """Gradient of the convolution output w.r.t. the weight tensor."""
    if _ACTIVE == "numba":
        gw = np.empty((kernel, x.shape[2], gy.shape[2]), dtype=x.dtype)
        return _conv1d_backward_weight_nb(x, gy, stride, pad, gw)
    return _conv1d_backward_weight_np(x, gy, stride, pad, kernel)
