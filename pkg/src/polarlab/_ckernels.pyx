# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv lowering kernels.

Same contract and column layout as ``polarlab._kernels_py``; results are
bit-identical for im2col. col2im accumulates in a different order than the
numpy path, so it agrees to rounding only.
"""

import numpy as np

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _out(Py_ssize_t h, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p) nogil:
    return (h + 2 * p - k) // s + 1


cdef inline void _jrange(Py_ssize_t wo, Py_ssize_t w, Py_ssize_t kj, Py_ssize_t stride,
                         Py_ssize_t pad, Py_ssize_t* lo, Py_ssize_t* hi) nogil:
    # valid output columns j satisfy 0 <= j*stride + kj - pad < w
    cdef Py_ssize_t a = pad - kj
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    hi[0] = (w - 1 + pad - kj) // stride + 1 if w - 1 + pad - kj >= 0 else 0
    if hi[0] > wo:
        hi[0] = wo
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def _im2col(real[:, :, :, ::1] x, real[:, ::1] cols, Py_ssize_t k,
            Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = _out(h, k, stride, pad), wo = _out(w, k, stride, pad)
    cdef Py_ssize_t ci, ki, kj, b, i, j, row, col, ii, lo, hi
    with nogil:
        for ci in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    _jrange(wo, w, kj, stride, pad, &lo, &hi)
                    col = 0
                    for b in range(n):
                        for i in range(ho):
                            ii = i * stride + ki - pad
                            if ii < 0 or ii >= h:
                                for j in range(wo):
                                    cols[row, col + j] = 0
                            else:
                                for j in range(lo):
                                    cols[row, col + j] = 0
                                for j in range(lo, hi):
                                    cols[row, col + j] = x[b, ci, ii, j * stride + kj - pad]
                                for j in range(hi, wo):
                                    cols[row, col + j] = 0
                            col += wo


def _col2im(real[:, ::1] cols, real[:, :, :, ::1] x, Py_ssize_t k,
            Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = _out(h, k, stride, pad), wo = _out(w, k, stride, pad)
    cdef Py_ssize_t ci, ki, kj, b, i, j, row, col, ii, lo, hi
    with nogil:
        for ci in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    _jrange(wo, w, kj, stride, pad, &lo, &hi)
                    col = 0
                    for b in range(n):
                        for i in range(ho):
                            ii = i * stride + ki - pad
                            if 0 <= ii < h:
                                for j in range(lo, hi):
                                    x[b, ci, ii, j * stride + kj - pad] += cols[row, col + j]
                            col += wo


def im2col(x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho, wo = _out(h, k, stride, pad), _out(w, k, stride, pad)
    cols = np.empty((c * k * k, n * ho * wo), dtype=x.dtype)
    _im2col(x, cols, k, stride, pad)
    return cols


def col2im(cols, shape, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cols = np.ascontiguousarray(cols)
    x = np.zeros(shape, dtype=cols.dtype)
    _col2im(cols, x, k, stride, pad)
    return x
