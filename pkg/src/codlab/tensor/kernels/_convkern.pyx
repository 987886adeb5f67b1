# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col/col2im kernels (float32/float64).

Padding is handled by bounds tests instead of materialising a padded
copy, which keeps the hot loops allocation-free. Single-threaded on
purpose: numeric results must be bit-reproducible.
"""

import numpy as np

cimport cython

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int k, int stride, int pad, int ho, int wo, real[:, :, ::1] out):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, ix, row
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            for ox in range(wo):
                                out[b, row, oy * wo + ox] = 0
                            continue
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            if ix < 0 or ix >= w:
                                out[b, row, oy * wo + ox] = 0
                            else:
                                out[b, row, oy * wo + ox] = x[b, ch, iy, ix]


def col2im(real[:, :, ::1] cols, int k, int stride, int pad, int ho, int wo, real[:, :, :, ::1] out):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, ix, row
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            if 0 <= ix < w:
                                out[b, ch, iy, ix] += cols[b, row, oy * wo + ox]
