# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for convolution patch extraction and max pooling.

Layouts and tie-breaking match admmforge.kernels.fallback bit for bit;
the import-time selector in admmforge.kernels picks whichever backend is
available. Padding bounds are hoisted out of the inner loops so the
per-row copies/accumulations vectorize.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double

BACKEND = "compiled"


def conv_out_size(int extent, int kernel, int stride, int pad):
    return (extent + 2 * pad - kernel) // stride + 1


cdef inline Py_ssize_t _ceil_div(Py_ssize_t a, Py_ssize_t b) nogil:
    return (a + b - 1) // b if a > 0 else 0


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (w + 2 * pw - kw) // sw + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((c * kh * kw, b * oh * ow), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t bi, ci, i, j, oi, oj, ih, iw0, row, col, oj_lo, oj_hi
    with nogil:
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    # valid output column range for this kernel offset
                    oj_lo = _ceil_div(pw - j, sw)
                    oj_hi = _ceil_div(w + pw - j, sw)
                    if oj_hi > ow:
                        oj_hi = ow
                    for bi in range(b):
                        for oi in range(oh):
                            ih = oi * sh + i - ph
                            if ih < 0 or ih >= h:
                                continue
                            col = (bi * oh + oi) * ow
                            iw0 = j - pw
                            if sw == 1:
                                for oj in range(oj_lo, oj_hi):
                                    cols[row, col + oj] = x[bi, ci, ih, iw0 + oj]
                            else:
                                for oj in range(oj_lo, oj_hi):
                                    cols[row, col + oj] = x[bi, ci, ih, iw0 + oj * sw]
    return out


def col2im(floating[:, ::1] cols, x_shape, int kh, int kw, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t b = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (w + 2 * pw - kw) // sw + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((b, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t bi, ci, i, j, oi, oj, ih, iw0, row, col, oj_lo, oj_hi
    with nogil:
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    oj_lo = _ceil_div(pw - j, sw)
                    oj_hi = _ceil_div(w + pw - j, sw)
                    if oj_hi > ow:
                        oj_hi = ow
                    for bi in range(b):
                        for oi in range(oh):
                            ih = oi * sh + i - ph
                            if ih < 0 or ih >= h:
                                continue
                            col = (bi * oh + oi) * ow
                            iw0 = j - pw
                            if sw == 1:
                                for oj in range(oj_lo, oj_hi):
                                    dx[bi, ci, ih, iw0 + oj] += cols[row, col + oj]
                            else:
                                for oj in range(oj_lo, oj_hi):
                                    dx[bi, ci, ih, iw0 + oj * sw] += cols[row, col + oj]
    return out


def maxpool_forward(floating[:, :, :, ::1] x, int k, int s):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - k) // s + 1
    cdef Py_ssize_t ow = (w - k) // s + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((b, c, oh, ow), dtype=dtype)
    idx_arr = np.empty((b, c, oh, ow), dtype=np.int64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t bi, ci, oi, oj, i, j, ih, iw, best_pos
    cdef floating best
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for oi in range(oh):
                    for oj in range(ow):
                        best = x[bi, ci, oi * s, oj * s]
                        best_pos = (oi * s) * w + oj * s
                        for i in range(k):
                            ih = oi * s + i
                            for j in range(k):
                                iw = oj * s + j
                                if x[bi, ci, ih, iw] > best:
                                    best = x[bi, ci, ih, iw]
                                    best_pos = ih * w + iw
                        out[bi, ci, oi, oj] = best
                        idx[bi, ci, oi, oj] = best_pos
    return out_arr, idx_arr


def maxpool_backward(floating[:, :, :, ::1] grad, cnp.int64_t[:, :, :, ::1] idx, int h, int w):
    cdef Py_ssize_t b = grad.shape[0], c = grad.shape[1]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((b, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t bi, ci, oi, oj, pos
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for oi in range(oh):
                    for oj in range(ow):
                        pos = idx[bi, ci, oi, oj]
                        dx[bi, ci, pos // w, pos % w] += grad[bi, ci, oi, oj]
    return out
