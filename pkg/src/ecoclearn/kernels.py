"""Hot numeric kernels: 2-d convolution and 2x2 max-pooling, forward and backward.

Two interchangeable backends live here. The default is numba ``@njit`` loop
kernels (compiled once, cached on disk). Setting the environment variable
``ECOCLEARN_NO_NUMBA=1`` before import selects the pure-numpy path instead
(stride tricks + einsum), which is also used automatically when numba is not
installed. Both backends produce the same values; ``benchmarks/bench_kernels.py``
compares their speed.

All kernels take and return C-contiguous float64 arrays. Convolution is
"valid" (no padding), stride 1. Pooling is 2x2 windows, stride 2, truncating
odd trailing rows/columns.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_NO_NUMBA_FLAG = os.environ.get("ECOCLEARN_NO_NUMBA", "").strip().lower()
_DISABLED = _NO_NUMBA_FLAG in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled via ECOCLEARN_NO_NUMBA")
    from numba import njit

    NUMBA_ENABLED = True
except ImportError:
    NUMBA_ENABLED = False


# ---------------------------------------------------------------------------
# pure-numpy backend
# ---------------------------------------------------------------------------

def conv2d_forward_np(x, w):
    """x (B,C,H,W) cross-correlated with w (F,C,kh,kw) -> (B,F,Ho,Wo)."""
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return np.ascontiguousarray(np.einsum("bchwpq,fcpq->bfhw", win, w))


def conv2d_backward_w_np(x, gy):
    """Gradient of conv2d_forward w.r.t. the filters."""
    ho, wo = gy.shape[2], gy.shape[3]
    win = sliding_window_view(x, (ho, wo), axis=(2, 3))
    return np.ascontiguousarray(np.einsum("bcpqhw,bfhw->fcpq", win, gy))


def conv2d_backward_x_np(gy, w):
    """Gradient of conv2d_forward w.r.t. the input (full correlation, flipped filters)."""
    kh, kw = w.shape[2], w.shape[3]
    gy_pad = np.pad(gy, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    win = sliding_window_view(gy_pad, (kh, kw), axis=(2, 3))
    w_flip = w[:, :, ::-1, ::-1]
    return np.ascontiguousarray(np.einsum("bfhwpq,fcpq->bchw", win, w_flip))


def maxpool2_forward_np(x):
    """2x2 stride-2 max pool. Returns (out, argmax) with argmax in {0,1,2,3} per window."""
    b, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :, : ho * 2, : wo * 2].reshape(b, c, ho, 2, wo, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
    idx = win.argmax(axis=4).astype(np.int64)
    out = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2_backward_np(gy, idx, h, w):
    """Scatter pooled gradients back to the argmax positions of an (…,h,w) input."""
    b, c, ho, wo = gy.shape
    gwin = np.zeros((b, c, ho, wo, 4))
    np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=4)
    gx = np.zeros((b, c, h, w))
    gwin = gwin.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    gx[:, :, : ho * 2, : wo * 2] = gwin.reshape(b, c, ho * 2, wo * 2)
    return gx


# ---------------------------------------------------------------------------
# numba backend (same contracts, explicit loops)
# ---------------------------------------------------------------------------

def _conv2d_forward_loops(x, w):
    b_n, c_n, h, wd = x.shape
    f_n, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    out = np.zeros((b_n, f_n, ho, wo))
    for b in range(b_n):
        for f in range(f_n):
            for c in range(c_n):
                for p in range(kh):
                    for q in range(kw):
                        wv = w[f, c, p, q]
                        for i in range(ho):
                            for j in range(wo):  # contiguous: vectorizes
                                out[b, f, i, j] += wv * x[b, c, i + p, j + q]
    return out


def _conv2d_backward_w_loops(x, gy):
    b_n, c_n, h, wd = x.shape
    f_n = gy.shape[1]
    ho, wo = gy.shape[2], gy.shape[3]
    kh, kw = h - ho + 1, wd - wo + 1
    gw = np.zeros((f_n, c_n, kh, kw))
    for f in range(f_n):
        for b in range(b_n):
            for c in range(c_n):
                for p in range(kh):
                    for q in range(kw):
                        s = 0.0
                        for i in range(ho):
                            for j in range(wo):
                                s += gy[b, f, i, j] * x[b, c, i + p, j + q]
                        gw[f, c, p, q] += s
    return gw


def _conv2d_backward_x_loops(gy, w):
    b_n, f_n, ho, wo = gy.shape
    c_n, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    h, wd = ho + kh - 1, wo + kw - 1
    gx = np.zeros((b_n, c_n, h, wd))
    for b in range(b_n):
        for f in range(f_n):
            for c in range(c_n):
                for p in range(kh):
                    for q in range(kw):
                        wv = w[f, c, p, q]
                        for i in range(ho):
                            for j in range(wo):
                                gx[b, c, i + p, j + q] += wv * gy[b, f, i, j]
    return gx


def _maxpool2_forward_loops(x):
    b_n, c_n, h, wd = x.shape
    ho, wo = h // 2, wd // 2
    out = np.zeros((b_n, c_n, ho, wo))
    idx = np.zeros((b_n, c_n, ho, wo), dtype=np.int64)
    for b in range(b_n):
        for c in range(c_n):
            for i in range(ho):
                for j in range(wo):
                    best = x[b, c, 2 * i, 2 * j]
                    arg = 0
                    k = 0
                    for p in range(2):
                        for q in range(2):
                            v = x[b, c, 2 * i + p, 2 * j + q]
                            if v > best:
                                best = v
                                arg = k
                            k += 1
                    out[b, c, i, j] = best
                    idx[b, c, i, j] = arg
    return out, idx


def _maxpool2_backward_loops(gy, idx, h, w):
    b_n, c_n, ho, wo = gy.shape
    gx = np.zeros((b_n, c_n, h, w))
    for b in range(b_n):
        for c in range(c_n):
            for i in range(ho):
                for j in range(wo):
                    k = idx[b, c, i, j]
                    gx[b, c, 2 * i + k // 2, 2 * j + k % 2] += gy[b, c, i, j]
    return gx


if NUMBA_ENABLED:
    conv2d_forward = njit(cache=True, fastmath=True)(_conv2d_forward_loops)
    conv2d_backward_w = njit(cache=True, fastmath=True)(_conv2d_backward_w_loops)
    conv2d_backward_x = njit(cache=True, fastmath=True)(_conv2d_backward_x_loops)
    maxpool2_forward = njit(cache=True)(_maxpool2_forward_loops)
    maxpool2_backward = njit(cache=True)(_maxpool2_backward_loops)
else:
    conv2d_forward = conv2d_forward_np
    conv2d_backward_w = conv2d_backward_w_np
    conv2d_backward_x = conv2d_backward_x_np
    maxpool2_forward = maxpool2_forward_np
    maxpool2_backward = maxpool2_backward_np


def backend_name():
    return "numba" if NUMBA_ENABLED else "numpy"
