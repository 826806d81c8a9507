"""Pure-NumPy convolution kernels (im2col / col2im formulation).

Same contracts as the compiled extension in ``_ckernels.pyx``; used when the
extension is not built or is disabled via SQAKD_PURE_PYTHON=1.
"""

import numpy as np


def _out_size(h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return ho, wo


def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    ho, wo = _out_size(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = x[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols, x_shape, kh, kw, stride, padding):
    n, c, h, w = x_shape
    ho, wo = _out_size(h, w, kh, kw, stride, padding)
    xpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for u in range(kh):
        for v in range(kw):
            xpad[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += cols6[:, :, u, v]
    if padding:
        return xpad[:, :, padding:-padding, padding:-padding]
    return xpad


def conv2d_forward(x, w, stride, padding):
    n = x.shape[0]
    f, _, kh, kw = w.shape
    ho, wo = _out_size(x.shape[2], x.shape[3], kh, kw, stride, padding)
    cols = _im2col(x, kh, kw, stride, padding)
    y = np.matmul(w.reshape(f, -1), cols)
    return np.ascontiguousarray(y.reshape(n, f, ho, wo))


def conv2d_backward_input(gy, w, x_shape, stride, padding):
    n = gy.shape[0]
    f, _, kh, kw = w.shape
    gflat = gy.reshape(n, f, -1)
    gcols = np.matmul(w.reshape(f, -1).T, gflat)
    return _col2im(gcols, x_shape, kh, kw, stride, padding)


def conv2d_backward_weight(gy, x, w_shape, stride, padding):
    n = gy.shape[0]
    f, _, kh, kw = w_shape
    cols = _im2col(x, kh, kw, stride, padding)
    gflat = gy.reshape(n, f, -1)
    dw = np.einsum("nfs,nks->fk", gflat, cols)
    return np.ascontiguousarray(dw.reshape(w_shape))
