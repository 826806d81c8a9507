# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# Direct-loop convolution kernels, the hot path of CNN training.
#
# The innermost loops run over contiguous output/input rows through raw
# pointers with a dedicated stride-1 path, and the forward/input-gradient
# kernels block four output channels per sweep so every loaded value feeds
# four fused multiply-adds. Per-tap output bounds are hoisted to keep
# branches out of the inner loops.

import numpy as np


ctypedef fused floating:
    float
    double


cdef inline Py_ssize_t _ox_lo(Py_ssize_t v, Py_ssize_t padding, Py_ssize_t stride) noexcept nogil:
    # smallest ox with ox*stride + v - padding >= 0
    if v >= padding:
        return 0
    return (padding - v + stride - 1) // stride


cdef inline Py_ssize_t _ox_hi(Py_ssize_t v, Py_ssize_t padding, Py_ssize_t stride,
                              Py_ssize_t wd, Py_ssize_t wo) noexcept nogil:
    # one past the largest ox with ox*stride + v - padding < wd
    cdef Py_ssize_t hi = (wd + padding - v + stride - 1) // stride
    return wo if hi > wo else hi


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, int stride, int padding):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * padding - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.zeros((n, f, ho, wo), dtype=dtype)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t i, of, ic, u, v, oy, ox, iy, lo, hi, fb
    cdef floating w0, w1, w2, w3, xv
    cdef floating *y0
    cdef floating *y1
    cdef floating *y2
    cdef floating *y3
    cdef const floating *xrow
    with nogil:
        for i in range(n):
            fb = 0
            while fb + 4 <= f:
                for ic in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            w0 = w[fb, ic, u, v]
                            w1 = w[fb + 1, ic, u, v]
                            w2 = w[fb + 2, ic, u, v]
                            w3 = w[fb + 3, ic, u, v]
                            lo = _ox_lo(v, padding, stride)
                            hi = _ox_hi(v, padding, stride, wd, wo)
                            for oy in range(ho):
                                iy = oy * stride + u - padding
                                if iy < 0 or iy >= h:
                                    continue
                                y0 = &y[i, fb, oy, 0]
                                y1 = &y[i, fb + 1, oy, 0]
                                y2 = &y[i, fb + 2, oy, 0]
                                y3 = &y[i, fb + 3, oy, 0]
                                xrow = &x[i, ic, iy, 0] + (v - padding)
                                if stride == 1:
                                    for ox in range(lo, hi):
                                        xv = xrow[ox]
                                        y0[ox] += w0 * xv
                                        y1[ox] += w1 * xv
                                        y2[ox] += w2 * xv
                                        y3[ox] += w3 * xv
                                else:
                                    for ox in range(lo, hi):
                                        xv = xrow[ox * stride]
                                        y0[ox] += w0 * xv
                                        y1[ox] += w1 * xv
                                        y2[ox] += w2 * xv
                                        y3[ox] += w3 * xv
                fb += 4
            for of in range(fb, f):
                for ic in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            w0 = w[of, ic, u, v]
                            lo = _ox_lo(v, padding, stride)
                            hi = _ox_hi(v, padding, stride, wd, wo)
                            for oy in range(ho):
                                iy = oy * stride + u - padding
                                if iy < 0 or iy >= h:
                                    continue
                                y0 = &y[i, of, oy, 0]
                                xrow = &x[i, ic, iy, 0] + (v - padding)
                                if stride == 1:
                                    for ox in range(lo, hi):
                                        y0[ox] += w0 * xrow[ox]
                                else:
                                    for ox in range(lo, hi):
                                        y0[ox] += w0 * xrow[ox * stride]
    return y_arr


def conv2d_backward_input(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] w, x_shape, int stride, int padding):
    cdef Py_ssize_t n = gy.shape[0], f = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t h = x_shape[2], wd = x_shape[3]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((n, c, h, wd), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t i, of, ic, u, v, oy, ox, iy, lo, hi, fb
    cdef floating w0, w1, w2, w3
    cdef floating *dxrow
    cdef const floating *g0
    cdef const floating *g1
    cdef const floating *g2
    cdef const floating *g3
    with nogil:
        for i in range(n):
            for ic in range(c):
                for u in range(kh):
                    for v in range(kw):
                        lo = _ox_lo(v, padding, stride)
                        hi = _ox_hi(v, padding, stride, wd, wo)
                        fb = 0
                        while fb + 4 <= f:
                            w0 = w[fb, ic, u, v]
                            w1 = w[fb + 1, ic, u, v]
                            w2 = w[fb + 2, ic, u, v]
                            w3 = w[fb + 3, ic, u, v]
                            for oy in range(ho):
                                iy = oy * stride + u - padding
                                if iy < 0 or iy >= h:
                                    continue
                                g0 = &gy[i, fb, oy, 0]
                                g1 = &gy[i, fb + 1, oy, 0]
                                g2 = &gy[i, fb + 2, oy, 0]
                                g3 = &gy[i, fb + 3, oy, 0]
                                dxrow = &dx[i, ic, iy, 0] + (v - padding)
                                if stride == 1:
                                    for ox in range(lo, hi):
                                        dxrow[ox] += w0 * g0[ox] + w1 * g1[ox] + w2 * g2[ox] + w3 * g3[ox]
                                else:
                                    for ox in range(lo, hi):
                                        dxrow[ox * stride] += w0 * g0[ox] + w1 * g1[ox] + w2 * g2[ox] + w3 * g3[ox]
                            fb += 4
                        for of in range(fb, f):
                            w0 = w[of, ic, u, v]
                            for oy in range(ho):
                                iy = oy * stride + u - padding
                                if iy < 0 or iy >= h:
                                    continue
                                g0 = &gy[i, of, oy, 0]
                                dxrow = &dx[i, ic, iy, 0] + (v - padding)
                                if stride == 1:
                                    for ox in range(lo, hi):
                                        dxrow[ox] += w0 * g0[ox]
                                else:
                                    for ox in range(lo, hi):
                                        dxrow[ox * stride] += w0 * g0[ox]
    return dx_arr


def conv2d_backward_weight(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] x, w_shape, int stride, int padding):
    cdef Py_ssize_t n = gy.shape[0], f = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t kh = w_shape[2], kw = w_shape[3]
    dtype = np.float32 if floating is float else np.float64
    dw_arr = np.zeros((f, c, kh, kw), dtype=dtype)
    cdef floating[:, :, :, ::1] dw = dw_arr
    cdef Py_ssize_t i, of, ic, u, v, oy, ox, iy, lo, hi
    cdef floating acc
    cdef const floating *grow
    cdef const floating *xrow
    with nogil:
        for i in range(n):
            for of in range(f):
                for ic in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            lo = _ox_lo(v, padding, stride)
                            hi = _ox_hi(v, padding, stride, wd, wo)
                            acc = 0
                            for oy in range(ho):
                                iy = oy * stride + u - padding
                                if iy < 0 or iy >= h:
                                    continue
                                grow = &gy[i, of, oy, 0]
                                xrow = &x[i, ic, iy, 0] + (v - padding)
                                if stride == 1:
                                    for ox in range(lo, hi):
                                        acc += grow[ox] * xrow[ox]
                                else:
                                    for ox in range(lo, hi):
                                        acc += grow[ox] * xrow[ox * stride]
                            dw[of, ic, u, v] += acc
    return dw_arr
