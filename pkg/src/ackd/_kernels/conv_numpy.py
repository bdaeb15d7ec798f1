"""Pure-numpy convolution kernels (im2col + BLAS matmul).

Fallback backend used when the compiled extension is unavailable or when
ACKD_KERNELS=numpy is set. All three entry points share the im2col layout:
column index = c * KH * KW + kh * KW + kw, matching kernel.reshape(O, -1).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND_NAME = "numpy"


def _out_extent(extent, k, stride, pad):
    return (extent + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    ho = _out_extent(h, kh, stride, pad)
    wo = _out_extent(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [B, C, HO, WO, KH, KW] -> [B, HO*WO, C*KH*KW]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b, ho * wo, c * kh * kw), ho, wo


def conv2d_forward(x, kernel, stride, pad):
    b = x.shape[0]
    o, _, kh, kw = kernel.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    flat = cols.reshape(b * ho * wo, -1) @ kernel.reshape(o, -1).T
    return np.ascontiguousarray(
        flat.reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    )


def conv2d_backward_kernel(gy, x, stride, pad, kh, kw):
    b, o, ho, wo = gy.shape
    c = x.shape[1]
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    gy_flat = gy.transpose(1, 0, 2, 3).reshape(o, b * ho * wo)
    gw = gy_flat @ cols.reshape(b * ho * wo, -1)
    return gw.reshape(o, c, kh, kw)


def conv2d_backward_input(gy, kernel, stride, pad, h, w):
    b, o, ho, wo = gy.shape
    _, c, kh, kw = kernel.shape
    gy_flat = gy.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
    gcols = gy_flat @ kernel.reshape(o, -1)
    gcols = gcols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                gcols[:, :, i, j]
            )
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w])
    return gxp
