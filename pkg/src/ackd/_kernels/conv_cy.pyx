# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled direct-convolution kernels.

Loops are ordered so the innermost index walks contiguous memory; batches
(forward / input-gradient) and output channels (kernel-gradient) are
parallelised with OpenMP. Writes are disjoint per parallel index, so results
are bit-reproducible across runs with any thread count.
"""

import numpy as np

cimport cython
from cython.parallel import prange

BACKEND_NAME = "compiled"

ctypedef fused real:
    float
    double


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    if real is float:
        out_np = np.zeros((b, o, ho, wo), dtype=np.float32)
    else:
        out_np = np.zeros((b, o, ho, wo), dtype=np.float64)
    cdef real[:, :, :, ::1] y = out_np
    cdef Py_ssize_t ib, io, ic, ikh, ikw, iho, iwo, hi, wi
    cdef real acc, wv
    with nogil:
        for ib in prange(b, schedule="static"):
            for io in range(o):
                for ic in range(c):
                    for ikh in range(kh):
                        for ikw in range(kw):
                            wv = w[io, ic, ikh, ikw]
                            for iho in range(ho):
                                hi = iho * stride - pad + ikh
                                if hi < 0 or hi >= h:
                                    continue
                                for iwo in range(wo):
                                    wi = iwo * stride - pad + ikw
                                    if wi < 0 or wi >= wd:
                                        continue
                                    y[ib, io, iho, iwo] += wv * x[ib, ic, hi, wi]
    return out_np


def conv2d_backward_input(real[:, :, :, ::1] gy, real[:, :, :, ::1] w,
                          int stride, int pad, int h, int wd):
    cdef Py_ssize_t b = gy.shape[0], o = gy.shape[1]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    if real is float:
        out_np = np.zeros((b, c, h, wd), dtype=np.float32)
    else:
        out_np = np.zeros((b, c, h, wd), dtype=np.float64)
    cdef real[:, :, :, ::1] gx = out_np
    cdef Py_ssize_t ib, io, ic, ikh, ikw, iho, iwo, hi, wi
    cdef real g
    with nogil:
        for ib in prange(b, schedule="static"):
            for io in range(o):
                for iho in range(ho):
                    for iwo in range(wo):
                        g = gy[ib, io, iho, iwo]
                        for ic in range(c):
                            for ikh in range(kh):
                                hi = iho * stride - pad + ikh
                                if hi < 0 or hi >= h:
                                    continue
                                for ikw in range(kw):
                                    wi = iwo * stride - pad + ikw
                                    if wi < 0 or wi >= wd:
                                        continue
                                    gx[ib, ic, hi, wi] += g * w[io, ic, ikh, ikw]
    return out_np


def conv2d_backward_kernel(real[:, :, :, ::1] gy, real[:, :, :, ::1] x,
                           int stride, int pad, int kh, int kw):
    cdef Py_ssize_t b = gy.shape[0], o = gy.shape[1]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    if real is float:
        out_np = np.zeros((o, c, kh, kw), dtype=np.float32)
    else:
        out_np = np.zeros((o, c, kh, kw), dtype=np.float64)
    cdef real[:, :, :, ::1] gw = out_np
    cdef Py_ssize_t ib, io, ic, ikh, ikw, iho, iwo, hi, wi
    cdef real g
    with nogil:
        for io in prange(o, schedule="static"):
            for ib in range(b):
                for iho in range(ho):
                    for iwo in range(wo):
                        g = gy[ib, io, iho, iwo]
                        for ic in range(c):
                            for ikh in range(kh):
                                hi = iho * stride - pad + ikh
                                if hi < 0 or hi >= h:
                                    continue
                                for ikw in range(kw):
                                    wi = iwo * stride - pad + ikw
                                    if wi < 0 or wi >= wd:
                                        continue
                                    gw[io, ic, ikh, ikw] += g * x[ib, ic, hi, wi]
    return out_np
