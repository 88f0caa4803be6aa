"""Pure-numpy conv lowering kernels.

Reference path used when the compiled extension is unavailable. The column
layout is ``(C*k*k, N*Ho*Wo)`` with rows ordered ``(c, ki, kj)`` and columns
ordered ``(n, i, j)``, matching ``kernel.reshape(O, C*k*k)``.
"""

import numpy as np


def out_size(h, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
            cols[:, ki, kj] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def col2im(cols, shape, k, stride, pad):
    n, c, h, w = shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    cols = cols.reshape(c, k, k, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += (
                cols[:, ki, kj].transpose(1, 0, 2, 3)
            )
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp
