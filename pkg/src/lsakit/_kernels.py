"""Hot inner loops for convolution and pooling.

col2im and the max-pool kernels exist twice: a numba ``@njit`` version
and a pure-numpy version. Both produce bit-identical results (same
accumulation order), so the backend choice only affects speed. im2col is
numpy in both modes. The backend is picked at import time
from the ``LSAKIT_DISABLE_NUMBA`` environment variable and can be switched
later with :func:`set_backend` (used by the benchmark and the tests).
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_DISABLED = os.environ.get("LSAKIT_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}
_backend = "numba" if HAVE_NUMBA and not _DISABLED else "numpy"


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    _backend = name


# ---------------------------------------------------------------- numpy path


def _im2col_np(x, kh, kw):
    # (N, C, OH, OW, kh, kw) -> (N, OH, OW, C, kh, kw)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _col2im_np(cols, h, w):
    n, oh, ow, c, kh, kw = cols.shape
    out = np.zeros((n, c, h, w))
    # offsets run backwards so each pixel sums its terms in window order,
    # which is the order the numba scatter visits them
    for p in range(kh - 1, -1, -1):
        for q in range(kw - 1, -1, -1):
            out[:, :, p:p + oh, q:q + ow] += cols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
    return out


def _maxpool_fwd_np(x, kh, kw):
    n, c, h, w = x.shape
    oh, ow = h // kh, w // kw
    win = x[:, :, :oh * kh, :ow * kw].reshape(n, c, oh, kh, ow, kw)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, kh * kw)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def _maxpool_bwd_np(grad_out, idx, h, w, kh, kw):
    n, c, oh, ow = grad_out.shape
    win = np.zeros((n, c, oh, ow, kh * kw))
    np.put_along_axis(win, idx[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(n, c, oh, ow, kh, kw).transpose(0, 1, 2, 4, 3, 5)
    out = np.zeros((n, c, h, w))
    out[:, :, :oh * kh, :ow * kw] = win.reshape(n, c, oh * kh, ow * kw)
    return out


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _col2im_nb(cols, h, w):
        n, oh, ow, c, kh, kw = cols.shape
        out = np.zeros((n, c, h, w))
        # window-order scatter: pixel (y, x) receives (p, q) = (y - i, x - j)
        # with i, j ascending, the same order as the reversed numpy loop
        for b in range(n):
            for i in range(oh):
                for j in range(ow):
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                out[b, ch, i + p, j + q] += cols[b, i, j, ch, p, q]
        return out

    @njit(cache=True)
    def _maxpool_fwd_nb(x, kh, kw):
        n, c, h, w = x.shape
        oh = h // kh
        ow = w // kw
        out = np.empty((n, c, oh, ow))
        idx = np.empty((n, c, oh, ow), dtype=np.int64)
        for b in range(n):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        best = x[b, ch, i * kh, j * kw]
                        arg = 0
                        for p in range(kh):
                            for q in range(kw):
                                v = x[b, ch, i * kh + p, j * kw + q]
                                # strict '>' keeps the first maximum, like argmax
                                if v > best:
                                    best = v
                                    arg = p * kw + q
                        out[b, ch, i, j] = best
                        idx[b, ch, i, j] = arg
        return out, idx

    @njit(cache=True)
    def _maxpool_bwd_nb(grad_out, idx, h, w, kh, kw):
        n, c, oh, ow = grad_out.shape
        out = np.zeros((n, c, h, w))
        for b in range(n):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        k = idx[b, ch, i, j]
                        out[b, ch, i * kh + k // kw, j * kw + k % kw] = grad_out[b, ch, i, j]
        return out


# ---------------------------------------------------------------- dispatch


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Valid, stride-1 patches of ``x`` laid out as ``(N, OH, OW, C, kh, kw)``.

    Numpy only: a strided-view copy already runs at memory bandwidth and a
    compiled loop measured slower.
    """
    return _im2col_np(x, kh, kw)


def col2im(cols: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to ``(N, C, h, w)``."""
    if _backend == "numba":
        return _col2im_nb(np.ascontiguousarray(cols), h, w)
    return _col2im_np(cols, h, w)


def maxpool_forward(x: np.ndarray, kh: int, kw: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling; returns pooled values and flat window argmax."""
    if _backend == "numba":
        return _maxpool_fwd_nb(np.ascontiguousarray(x), kh, kw)
    return _maxpool_fwd_np(x, kh, kw)


def maxpool_backward(grad_out, idx, h, w, kh, kw) -> np.ndarray:
    if _backend == "numba":
        return _maxpool_bwd_nb(np.ascontiguousarray(grad_out), idx, h, w, kh, kw)
    return _maxpool_bwd_np(grad_out, idx, h, w, kh, kw)
