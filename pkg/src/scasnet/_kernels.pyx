# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for dilated im2col/col2im and 2x2 max pooling.

Every routine mirrors a function in :mod:`scasnet.kernels` and must return
identical values; the numpy versions are the reference.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int stride, int dilation,
           int out_h, int out_w):
    cdef Py_ssize_t n_batch = xp.shape[0], channels = xp.shape[1]
    cdef Py_ssize_t n, c, i, j, oh, ow, row, col, hi
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.empty((n_batch, channels * kh * kw, out_h * out_w), dtype=dtype)
    cdef real[:, :, ::1] cols = cols_arr
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oh in range(out_h):
                            hi = oh * stride + i * dilation
                            col = oh * out_w
                            for ow in range(out_w):
                                cols[n, row, col + ow] = xp[n, c, hi, ow * stride + j * dilation]
    return cols_arr


def col2im(real[:, :, ::1] cols, int channels, int hp, int wp, int kh, int kw,
           int stride, int dilation, int out_h, int out_w):
    cdef Py_ssize_t n_batch = cols.shape[0]
    cdef Py_ssize_t n, c, i, j, oh, ow, row, col, hi
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n_batch, channels, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    # accumulation order (tap-major, then output position) matches the numpy fallback
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oh in range(out_h):
                            hi = oh * stride + i * dilation
                            col = oh * out_w
                            for ow in range(out_w):
                                out[n, c, hi, ow * stride + j * dilation] += cols[n, row, col + ow]
    return out_arr


def maxpool2x2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t n_batch = x.shape[0], channels = x.shape[1]
    cdef Py_ssize_t oh_n = x.shape[2] // 2, ow_n = x.shape[3] // 2
    cdef Py_ssize_t n, c, oh, ow
    cdef real best, v
    cdef cnp.int8_t arg
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n_batch, channels, oh_n, ow_n), dtype=dtype)
    idx_arr = np.empty((n_batch, channels, oh_n, ow_n), dtype=np.int8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] idx = idx_arr
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for oh in range(oh_n):
                    for ow in range(ow_n):
                        # strict '>' keeps the first row-major maximum
                        best = x[n, c, 2 * oh, 2 * ow]
                        arg = 0
                        v = x[n, c, 2 * oh, 2 * ow + 1]
                        if v > best:
                            best = v
                            arg = 1
                        v = x[n, c, 2 * oh + 1, 2 * ow]
                        if v > best:
                            best = v
                            arg = 2
                        v = x[n, c, 2 * oh + 1, 2 * ow + 1]
                        if v > best:
                            best = v
                            arg = 3
                        out[n, c, oh, ow] = best
                        idx[n, c, oh, ow] = arg
    return out_arr, idx_arr


def maxpool2x2_backward(real[:, :, :, ::1] grad, cnp.int8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n_batch = grad.shape[0], channels = grad.shape[1]
    cdef Py_ssize_t oh_n = grad.shape[2], ow_n = grad.shape[3]
    cdef Py_ssize_t n, c, oh, ow
    cdef cnp.int8_t a
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((n_batch, channels, 2 * oh_n, 2 * ow_n), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for oh in range(oh_n):
                    for ow in range(ow_n):
                        a = idx[n, c, oh, ow]
                        dx[n, c, 2 * oh + (a >> 1), 2 * ow + (a & 1)] = grad[n, c, oh, ow]
    return dx_arr
