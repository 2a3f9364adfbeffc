# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled conv/pool kernels.

Loop order keeps the innermost index on the contiguous image axis so the
C compiler can vectorise. Accumulation order is fixed, so results are
deterministic run to run. The max-pool tie rule (first maximum in
row-major block order) matches the numpy reference backend.
"""

import numpy as np


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] k):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = k.shape[0], kh = k.shape[2], kw = k.shape[3]
    cdef Py_ssize_t OH = H - kh + 1, OW = W - kw + 1
    y_arr = np.zeros((B, Co, OH, OW))
    cdef double[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t b, co, ci, u, v, i, j
    cdef double kk
    for b in range(B):
        for co in range(Co):
            for ci in range(Ci):
                for u in range(kh):
                    for v in range(kw):
                        kk = k[co, ci, u, v]
                        for i in range(OH):
                            for j in range(OW):
                                y[b, co, i, j] += kk * x[b, ci, i + u, j + v]
    return y_arr


def conv2d_backward(const double[:, :, :, ::1] x,
                    const double[:, :, :, ::1] k,
                    const double[:, :, :, ::1] gy):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = k.shape[0], kh = k.shape[2], kw = k.shape[3]
    cdef Py_ssize_t OH = gy.shape[2], OW = gy.shape[3]
    gx_arr = np.zeros((B, Ci, H, W))
    gk_arr = np.zeros((Co, Ci, kh, kw))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t b, co, ci, u, v, i, j
    cdef double kk, acc
    for b in range(B):
        for co in range(Co):
            for ci in range(Ci):
                for u in range(kh):
                    for v in range(kw):
                        kk = k[co, ci, u, v]
                        acc = 0.0
                        for i in range(OH):
                            for j in range(OW):
                                acc += gy[b, co, i, j] * x[b, ci, i + u, j + v]
                                gx[b, ci, i + u, j + v] += kk * gy[b, co, i, j]
                        gk[co, ci, u, v] += acc
    return gx_arr, gk_arr


def maxpool2_forward(const double[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = H // 2, OW = W // 2
    y_arr = np.zeros((B, C, OH, OW))
    idx_arr = np.zeros((B, C, OH, OW), dtype=np.int64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef long long[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, c, i, j, u, v
    cdef double best, val
    cdef long long which
    for b in range(B):
        for c in range(C):
            for i in range(OH):
                for j in range(OW):
                    best = x[b, c, 2 * i, 2 * j]
                    which = 0
                    for u in range(2):
                        for v in range(2):
                            val = x[b, c, 2 * i + u, 2 * j + v]
                            if val > best:
                                best = val
                                which = 2 * u + v
                    y[b, c, i, j] = best
                    idx[b, c, i, j] = which
    return y_arr, idx_arr


def maxpool2_backward(const long long[:, :, :, ::1] idx,
                      const double[:, :, :, ::1] gy,
                      Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1], OH = gy.shape[2], OW = gy.shape[3]
    gx_arr = np.zeros((B, C, H, W))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, c, i, j
    cdef long long which
    for b in range(B):
        for c in range(C):
            for i in range(OH):
                for j in range(OW):
                    which = idx[b, c, i, j]
                    gx[b, c, 2 * i + which // 2, 2 * j + which % 2] = gy[b, c, i, j]
    return gx_arr
