"""Float kernels for the analysis transform (depthwise convolution).

The padded input is passed in; both variants return identical shapes. The
numba loops and the numpy slice-sum agree to float32 rounding, not bitwise.
"""

import numpy as np

from ._jit import USE_NUMBA, njit


@njit
def _dw_forward_nb(xp, w, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    k = w.shape[1]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    wv = w[ch, i, j]
                    for y in range(ho):
                        row = xp[b, ch, stride * y + i]
                        orow = out[b, ch, y]
                        if stride == 1:
                            # contiguous form so the loop vectorizes
                            seg = row[j:j + wo]
                            for x in range(wo):
                                orow[x] += wv * seg[x]
                        else:
                            for x in range(wo):
                                orow[x] += wv * row[stride * x + j]
    return out


@njit
def _dw_backward_nb(xp, w, g, stride):
    n, c = xp.shape[0], xp.shape[1]
    k = w.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros((c, k, k), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    wv = w[ch, i, j]
                    acc = 0.0
                    for y in range(ho):
                        row = xp[b, ch, stride * y + i]
                        grow = g[b, ch, y]
                        gxrow = gxp[b, ch, stride * y + i]
                        for x in range(wo):
                            acc += grow[x] * row[stride * x + j]
                            gxrow[stride * x + j] += wv * grow[x]
                    gw[ch, i, j] += acc
    return gxp, gw.astype(xp.dtype)


def _dw_forward_np(xp, w, stride, ho, wo):
    n, c = xp.shape[:2]
    k = w.shape[1]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            sl = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out += w[None, :, i, j, None, None] * sl
    return out


def _dw_backward_np(xp, w, g, stride):
    k = w.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros(w.shape, dtype=np.float64)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None), slice(i, i + stride * ho, stride),
                  slice(j, j + stride * wo, stride))
            gw[:, i, j] = np.einsum("nchw,nchw->c", g, xp[sl], dtype=np.float64)
            gxp[sl] += w[None, :, i, j, None, None] * g
    return gxp, gw.astype(xp.dtype)


if USE_NUMBA:
    dwconv_forward = _dw_forward_nb
    dwconv_backward = _dw_backward_nb
else:
    dwconv_forward = _dw_forward_np
    dwconv_backward = _dw_backward_np
