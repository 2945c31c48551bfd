# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Direct-loop valid-mode 2-D convolution kernels (stride 1)."""

import numpy as np
cimport cython
from cython cimport floating


def conv2d_forward(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] w):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = H - KH + 1, OW = W - KW + 1
    cdef Py_ssize_t n, o, c, i, j, u, v
    cdef floating wv
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((N, O, OH, OW), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    # innermost loop walks a contiguous output row with one weight held fixed
    for n in range(N):
        for o in range(O):
            for c in range(C):
                for u in range(KH):
                    for v in range(KW):
                        wv = w[o, c, u, v]
                        for i in range(OH):
                            for j in range(OW):
                                out[n, o, i, j] += wv * x[n, c, i + u, j + v]
    return out_arr


def conv2d_backward_input(const floating[:, :, :, ::1] dout, const floating[:, :, :, ::1] w,
                          Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t N = dout.shape[0], O = dout.shape[1]
    cdef Py_ssize_t OH = dout.shape[2], OW = dout.shape[3]
    cdef Py_ssize_t C = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t n, o, c, i, j, u, v
    cdef floating g
    dtype = np.float64 if floating is double else np.float32
    dx_arr = np.zeros((N, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    for n in range(N):
        for o in range(O):
            for i in range(OH):
                for j in range(OW):
                    g = dout[n, o, i, j]
                    if g == 0:
                        continue
                    for c in range(C):
                        for u in range(KH):
                            for v in range(KW):
                                dx[n, c, i + u, j + v] += g * w[o, c, u, v]
    return dx_arr


def conv2d_backward_weight(const floating[:, :, :, ::1] dout, const floating[:, :, :, ::1] x,
                           Py_ssize_t KH, Py_ssize_t KW):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t O = dout.shape[1], OH = dout.shape[2], OW = dout.shape[3]
    cdef Py_ssize_t n, o, c, i, j, u, v
    cdef floating acc
    dtype = np.float64 if floating is double else np.float32
    dw_arr = np.zeros((O, C, KH, KW), dtype=dtype)
    cdef floating[:, :, :, ::1] dw = dw_arr
    for n in range(N):
        for o in range(O):
            for c in range(C):
                for u in range(KH):
                    for v in range(KW):
                        acc = 0
                        for i in range(OH):
                            for j in range(OW):
                                acc = acc + dout[n, o, i, j] * x[n, c, i + u, j + v]
                        dw[o, c, u, v] += acc
    return dw_arr
