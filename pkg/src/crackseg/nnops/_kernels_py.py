"""Pure-numpy reference versions of the compiled convolution kernels.

Signatures and output layouts match ``_kernels.pyx`` exactly; the test suite
checks the two against each other whenever the extension is built.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, sh, sw, ph, pw):
    """Unfold ``x`` [B,C,H,W] into columns [B, C*kh*kw, Ho*Wo] (row order c, i, j)."""
    b, c, h, w = x.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    # win: [B, C, Ho, Wo, kh, kw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(b, c * kh * kw, ho * wo)


def col2im(cols, b, c, h, w, kh, kw, sh, sw, ph, pw):
    """Adjoint of :func:`im2col`: scatter-add columns back to [B,C,H,W]."""
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += cols[:, :, i, j]
    return np.ascontiguousarray(out[:, :, ph : ph + h, pw : pw + w])


def depthwise_forward(x, w, ph, pw):
    """Per-channel correlation of ``x`` [B,C,H,W] with ``w`` [C,kh,kw], stride 1."""
    b, c, h, wd = x.shape
    _, kh, kw = w.shape
    ho = h + 2 * ph - kh + 1
    wo = wd + 2 * pw - kw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    out = np.zeros((b, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += w[:, i, j][None, :, None, None] * xp[:, :, i : i + ho, j : j + wo]
    return out


def depthwise_backward(g, x, w, ph, pw):
    """Gradients of :func:`depthwise_forward` w.r.t. input and kernels."""
    b, c, h, wd = x.shape
    _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    dxp = np.zeros(xp.shape, dtype=x.dtype)
    dw = np.zeros(w.shape, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + ho, j : j + wo] += w[:, i, j][None, :, None, None] * g
            dw[:, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i : i + ho, j : j + wo])
    return np.ascontiguousarray(dxp[:, :, ph : ph + h, pw : pw + wd]), dw
