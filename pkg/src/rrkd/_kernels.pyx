# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for NCHW feature maps.

Both backends accumulate every ``col2im`` element in the same order, so their
results are bit-identical.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def _im2col(const real[:, :, :, ::1] x, real[:, ::1] out,
            int kh, int kw, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t n_img = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t n, oh, ow, c, i, j, y, xx, row, col
    with nogil:
        for n in range(n_img):
            for oh in range(ho):
                for ow in range(wo):
                    row = (n * ho + oh) * wo + ow
                    col = 0
                    for c in range(chans):
                        for i in range(kh):
                            y = oh * stride + i - pad
                            for j in range(kw):
                                xx = ow * stride + j - pad
                                if 0 <= y < h and 0 <= xx < w:
                                    out[row, col] = x[n, c, y, xx]
                                else:
                                    out[row, col] = 0
                                col += 1


def _col2im(const real[:, ::1] cols, real[:, :, :, ::1] out,
            int kh, int kw, int stride, int pad, int ho, int wo):
    # out must be zero-filled; rows are visited in (oh, ow) order, which the
    # numpy fallback mirrors by walking kernel offsets from last to first.
    cdef Py_ssize_t n_img = out.shape[0], chans = out.shape[1]
    cdef Py_ssize_t h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t n, oh, ow, c, i, j, y, xx, row, col
    with nogil:
        for n in range(n_img):
            for oh in range(ho):
                for ow in range(wo):
                    row = (n * ho + oh) * wo + ow
                    col = 0
                    for c in range(chans):
                        for i in range(kh):
                            y = oh * stride + i - pad
                            if y < 0 or y >= h:
                                col += kw
                                continue
                            for j in range(kw):
                                xx = ow * stride + j - pad
                                if 0 <= xx < w:
                                    out[n, c, y, xx] += cols[row, col]
                                col += 1


def im2col(x, int kh, int kw, int stride, int pad):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.empty((n * ho * wo, c * kh * kw), dtype=x.dtype)
    _im2col(x, out, kh, kw, stride, pad, ho, wo)
    return out


def col2im(cols, shape, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    n, c, h, w = shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride, pad, ho, wo)
    return out
