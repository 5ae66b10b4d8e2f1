"""Pure-numpy im2col / col2im, used when the compiled extension is absent."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_extent(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo].transpose(0, 2, 3, 1, 4, 5)
    return win.reshape(n * ho * wo, c * kh * kw)


def col2im(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)
    cols6 = cols.reshape(n, ho, wo, c, kh, kw)
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    # Last-to-first offsets reproduce the compiled kernel's accumulation order.
    for i in reversed(range(kh)):
        for j in reversed(range(kw)):
            padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols6[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    return np.ascontiguousarray(padded[:, :, pad:pad + h, pad:pad + w])
