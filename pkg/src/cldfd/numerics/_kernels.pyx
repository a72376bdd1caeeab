# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col/col2im.

Same column layout and accumulation order as ``_fallback``; outputs match it
bitwise.
"""
import numpy as np
cimport cython
from cython cimport floating


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int padding):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t K = C * kh * kw
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B * Ho * Wo, K), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t b, ho, wo, c, i, j, row0, col, y, xx, wo_lo, wo_hi
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    col = (c * kh + i) * kw + j
                    # valid output columns: 0 <= wo*stride + j - padding < W
                    wo_lo = 0
                    while wo_lo < Wo and wo_lo * stride + j - padding < 0:
                        wo_lo += 1
                    wo_hi = Wo
                    while wo_hi > wo_lo and (wo_hi - 1) * stride + j - padding >= W:
                        wo_hi -= 1
                    for ho in range(Ho):
                        y = ho * stride + i - padding
                        if y < 0 or y >= H:
                            continue
                        row0 = (b * Ho + ho) * Wo
                        for wo in range(wo_lo, wo_hi):
                            out[row0 + wo, col] = x[b, c, y, wo * stride + j - padding]
    return out_arr


def col2im(floating[:, ::1] cols, tuple x_shape, int kh, int kw, int stride, int padding):
    cdef Py_ssize_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t Hp = H + 2 * padding, Wp = W + 2 * padding
    cdef Py_ssize_t Ho = (Hp - kh) // stride + 1
    cdef Py_ssize_t Wo = (Wp - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    pad_arr = np.zeros((B, C, Hp, Wp), dtype=dtype)
    cdef floating[:, :, :, ::1] pad = pad_arr
    cdef Py_ssize_t b, c, i, j, ho, wo, row0, col, y
    # (ki, kj) outermost per channel: each output cell sees its terms in the
    # same order as the numpy fallback
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    col = (c * kh + i) * kw + j
                    for ho in range(Ho):
                        y = ho * stride + i
                        row0 = (b * Ho + ho) * Wo
                        for wo in range(Wo):
                            pad[b, c, y, wo * stride + j] += cols[row0 + wo, col]
    if padding:
        return np.ascontiguousarray(pad_arr[:, :, padding:padding + H, padding:padding + W])
    return pad_arr
