# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (im2col/col2im, depthwise correlation).

Loop order keeps the innermost index on the contiguous axis. No threading:
every accumulation happens in a fixed order, so results are bit-stable.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline void _ox_range(Py_ssize_t j, Py_ssize_t sw, Py_ssize_t pw, Py_ssize_t W, Py_ssize_t Wo,
                           Py_ssize_t *x0, Py_ssize_t *x1) noexcept nogil:
    # valid ox range where 0 <= ox * sw + j - pw < W
    cdef Py_ssize_t lo = pw - j, hi
    if lo <= 0:
        lo = 0
    else:
        lo = (lo + sw - 1) // sw
    hi = W - 1 + pw - j
    if hi < 0:
        x0[0] = 0
        x1[0] = 0
        return
    hi = hi // sw + 1
    if hi > Wo:
        hi = Wo
    x0[0] = lo
    x1[0] = hi if hi > lo else lo


def _im2col(real[:, :, :, ::1] x, real[:, :, ::1] cols, int kh, int kw, int sh, int sw, int ph, int pw):
    # cols arrives zeroed, so only in-bounds entries are written
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t Wo = (W + 2 * pw - kw) // sw + 1
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, row, x0, x1, base, shift
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        _ox_range(j, sw, pw, W, Wo, &x0, &x1)
                        shift = j - pw
                        for oy in range(Ho):
                            iy = oy * sh + i - ph
                            if iy < 0 or iy >= H:
                                continue
                            base = oy * Wo
                            for ox in range(x0, x1):
                                cols[b, row, base + ox] = x[b, c, iy, ox * sw + shift]


def _col2im(real[:, :, ::1] cols, real[:, :, :, ::1] out, int kh, int kw, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t Wo = (W + 2 * pw - kw) // sw + 1
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, row, x0, x1, base, shift
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        _ox_range(j, sw, pw, W, Wo, &x0, &x1)
                        shift = j - pw
                        for oy in range(Ho):
                            iy = oy * sh + i - ph
                            if iy < 0 or iy >= H:
                                continue
                            base = oy * Wo
                            for ox in range(x0, x1):
                                out[b, c, iy, ox * sw + shift] += cols[b, row, base + ox]


def _dw_forward(real[:, :, :, ::1] x, real[:, :, ::1] w, real[:, :, :, ::1] out, int ph, int pw):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, ix, x0, x1
    cdef real wv
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[c, i, j]
                        # valid ox range where 0 <= ox + j - pw < W
                        x0 = pw - j
                        if x0 < 0:
                            x0 = 0
                        x1 = W + pw - j
                        if x1 > Wo:
                            x1 = Wo
                        for oy in range(Ho):
                            iy = oy + i - ph
                            if iy < 0 or iy >= H:
                                continue
                            for ox in range(x0, x1):
                                out[b, c, oy, ox] += wv * x[b, c, iy, ox + j - pw]


def _dw_backward(real[:, :, :, ::1] g, real[:, :, :, ::1] x, real[:, :, ::1] w,
                 real[:, :, :, ::1] dx, real[:, :, ::1] dw, int ph, int pw):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, x0, x1
    cdef real wv, gv, acc
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    wv = w[c, i, j]
                    x0 = pw - j
                    if x0 < 0:
                        x0 = 0
                    x1 = W + pw - j
                    if x1 > Wo:
                        x1 = Wo
                    acc = 0
                    for b in range(B):
                        for oy in range(Ho):
                            iy = oy + i - ph
                            if iy < 0 or iy >= H:
                                continue
                            for ox in range(x0, x1):
                                gv = g[b, c, oy, ox]
                                dx[b, c, iy, ox + j - pw] += wv * gv
                                acc = acc + gv * x[b, c, iy, ox + j - pw]
                    dw[c, i, j] = acc


def im2col(x, int kh, int kw, int sh, int sw, int ph, int pw):
    x = np.ascontiguousarray(x)
    B, C, H, W = x.shape
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    cols = np.zeros((B, C * kh * kw, Ho * Wo), dtype=x.dtype)
    _im2col(x, cols, kh, kw, sh, sw, ph, pw)
    return cols


def col2im(cols, int b, int c, int h, int w, int kh, int kw, int sh, int sw, int ph, int pw):
    cols = np.ascontiguousarray(cols)
    out = np.zeros((b, c, h, w), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, sh, sw, ph, pw)
    return out


def depthwise_forward(x, w, int ph, int pw):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    B, C, H, W = x.shape
    Ho = H + 2 * ph - w.shape[1] + 1
    Wo = W + 2 * pw - w.shape[2] + 1
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    _dw_forward(x, w, out, ph, pw)
    return out


def depthwise_backward(g, x, w, int ph, int pw):
    g = np.ascontiguousarray(g, dtype=x.dtype)
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    dx = np.zeros(x.shape, dtype=x.dtype)
    dw = np.zeros(w.shape, dtype=x.dtype)
    _dw_backward(g, x, w, dx, dw, ph, pw)
    return dx, dw
