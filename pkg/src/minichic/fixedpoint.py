"""Integer arithmetic for the decode path.

Activations and weights are Q16.16 integers held in int64. Every layer
accumulates exact products, then rounds once: ``(acc + 2**15) >> 16``.
The Laplace CDF that drives the range coder is integer-only as well. It
uses table-based exp2 with linear interpolation, so every quantized
frequency is reproducible bit-for-bit on any platform, with or without numba.
"""

from decimal import ROUND_HALF_EVEN, Decimal, localcontext

import numpy as np

from ._jit import USE_NUMBA, njit

FRAC_BITS = 16
ONE = 1 << FRAC_BITS
HALF = 1 << (FRAC_BITS - 1)
ACT_MAX = 1 << 30  # |activation| <= 16384.0

PMF_BITS = 16
TOTAL = 1 << PMF_BITS
MAX_ALPHABET = 1 << 15

SCALE_MIN = 1e-3
SCALE_MAX = 256.0
Z_MAX = 40 << 16  # exp(-40) underflows Q31
AD_MAX = 10240 << 16  # |d| beyond 40 * SCALE_MAX always saturates


def _exact_constants():
    with localcontext() as ctx:
        ctx.prec = 60
        ln2 = Decimal(2).ln()

        def rnd(x):
            return int(x.to_integral_value(rounding=ROUND_HALF_EVEN))

        neg = [rnd((-Decimal(j) / 256 * ln2).exp() * (1 << 31)) for j in range(257)]
        pos = [rnd((Decimal(j) / 256 * ln2).exp() * (1 << 30)) for j in range(257)]
        log2e = rnd((1 / ln2) * (1 << 32))
        raw_min = rnd(Decimal("0.001").ln() * ONE)
        raw_max = rnd(Decimal(256).ln() * ONE)
    return (np.array(neg, dtype=np.int64), np.array(pos, dtype=np.int64), log2e, raw_min, raw_max)


EXP2_NEG_Q31, EXP2_POS_Q30, LOG2E_Q32, RAW_MIN_Q16, RAW_MAX_Q16 = _exact_constants()


@njit
def exp_neg_q31(z):
    """round(exp(-z/2^16) * 2^31), approximately, for z >= 0."""
    if z >= Z_MAX:
        return 0
    y = (z * LOG2E_Q32) >> 32
    n = y >> 16
    f = y & 0xFFFF
    idx = f >> 8
    fr = f & 0xFF
    a = EXP2_NEG_Q31[idx]
    b = EXP2_NEG_Q31[idx + 1]
    v = a - (((a - b) * fr) >> 8)
    return v >> n


@njit
def inv_scale_q20(raw_q16):
    """exp(-clamp(raw)) in Q20: the reciprocal Laplace scale 1/b."""
    raw = raw_q16
    if raw < RAW_MIN_Q16:
        raw = RAW_MIN_Q16
    elif raw > RAW_MAX_Q16:
        raw = RAW_MAX_Q16
    u = (-raw * LOG2E_Q32) >> 32
    n = u >> 16
    f = u & 0xFFFF
    idx = f >> 8
    fr = f & 0xFF
    a = EXP2_POS_Q30[idx]
    b = EXP2_POS_Q30[idx + 1]
    v = a + (((b - a) * fr) >> 8)
    sh = n - 10
    if sh >= 0:
        return v << sh
    return v >> (-sh)


@njit
def laplace_cdf_q32(t_q16, mu_q16, invb_q20):
    """Laplace CDF at t, scaled to [0, 2^32]."""
    d = t_q16 - mu_q16
    ad = -d if d < 0 else d
    if ad >= AD_MAX:
        z = Z_MAX
    else:
        z = (ad * invb_q20) >> 20
        if z > Z_MAX:
            z = Z_MAX
    e = exp_neg_q31(z)
    if d < 0:
        return e
    return (1 << 32) - e


@njit
def cum_freq(i, n, amin, mu_q16, invb_q20):
    """Cumulative frequency of symbol index i over an n-symbol alphabet.

    Tails are folded into the two end symbols; every symbol keeps freq >= 1.
    """
    if i <= 0:
        return 0
    if i >= n:
        return TOTAL
    t = ((amin + i) << 16) - HALF
    F = laplace_cdf_q32(t, mu_q16, invb_q20)
    return ((F * (TOTAL - n)) >> 32) + i


@njit
def find_symbol(target, n, amin, mu_q16, invb_q20):
    """Largest index i with cum_freq(i) <= target."""
    lo = 0
    hi = n - 1
    while lo < hi:
        mid = (lo + hi + 1) >> 1
        if cum_freq(mid, n, amin, mu_q16, invb_q20) <= target:
            lo = mid
        else:
            hi = mid - 1
    return lo


@njit
def clamp_mu(mu_q16):
    lim = 1 << 31
    if mu_q16 > lim:
        return lim
    if mu_q16 < -lim:
        return -lim
    return mu_q16


def laplace_cdf_table(n: int, amin: int, mu_q16: int, invb_q20: int) -> np.ndarray:
    """Full cumulative table (length n + 1) for one distribution."""
    return np.array([cum_freq(i, n, amin, mu_q16, invb_q20) for i in range(n + 1)], dtype=np.int64)


# ARM ---------------------------------------------------------------------------

@njit
def arm_fixed(ctx, arm_w, arm_b, meta, buf_a, buf_b):
    """Fixed-point ARM MLP on one context vector; returns (mu_q16, raw_q16).

    meta rows: (in, out, residual, weight offset, bias offset).
    """
    nl = meta.shape[0]
    x = buf_a
    y = buf_b
    for i in range(ctx.shape[0]):
        x[i] = ctx[i]
    for li in range(nl):
        fin = meta[li, 0]
        fout = meta[li, 1]
        res = meta[li, 2]
        wo = meta[li, 3]
        bo = meta[li, 4]
        last = li == nl - 1
        for o in range(fout):
            acc = 0
            base = wo + o * fin
            for i in range(fin):
                acc += arm_w[base + i] * x[i]
            v = ((acc + HALF) >> 16) + arm_b[bo + o]
            if res:
                v += x[o]
            if not last and v < 0:
                v = 0
            if v > ACT_MAX:
                v = ACT_MAX
            elif v < -ACT_MAX:
                v = -ACT_MAX
            y[o] = v
        x, y = y, x
    return x[0], x[1]


@njit
def gather_ctx_int(grid, r, c, offsets, ctx):
    h, w = grid.shape
    for k in range(offsets.shape[0]):
        rr = r + offsets[k, 0]
        cc = c + offsets[k, 1]
        if rr >= 0 and cc >= 0 and cc < w and rr < h:
            ctx[k] = grid[rr, cc] << 16
        else:
            ctx[k] = 0


@njit
def arm_fixed_grid(grid, offsets, arm_w, arm_b, meta):
    """(mu_q16, raw_q16) for every position of an integer grid."""
    h, w = grid.shape
    size = offsets.shape[0]
    width = max(size, 2)
    for li in range(meta.shape[0]):
        width = max(width, meta[li, 1])
    ctx = np.zeros(size, dtype=np.int64)
    buf_a = np.zeros(width, dtype=np.int64)
    buf_b = np.zeros(width, dtype=np.int64)
    out = np.zeros((h, w, 2), dtype=np.int64)
    for r in range(h):
        for c in range(w):
            gather_ctx_int(grid, r, c, offsets, ctx)
            mu, raw = arm_fixed(ctx, arm_w, arm_b, meta, buf_a, buf_b)
            out[r, c, 0] = mu
            out[r, c, 1] = raw
    return out


# upsampling / synthesis ------------------------------------------------------------

@njit
def _round_clamp(acc):
    v = (acc + HALF) >> 16
    if v > ACT_MAX:
        return ACT_MAX
    if v < -ACT_MAX:
        return -ACT_MAX
    return v


@njit
def _tconv2x_nb_padded(xp, h, w, wq, oh, ow, tk, ts):
    nt = tk.shape[1]
    out = np.zeros((oh, ow), dtype=np.int64)
    acc = np.zeros(w, dtype=np.int64)
    for r1 in range(2):
        for r2 in range(2):
            for m1 in range(h):
                oy = 2 * m1 + r1
                if oy >= oh:
                    break
                acc[:] = 0
                for a in range(nt):
                    row = xp[m1 + ts[r1, a]]
                    k1 = tk[r1, a]
                    for b in range(nt):
                        wv = wq[k1, tk[r2, b]]
                        seg = row[ts[r2, b]:ts[r2, b] + w]
                        for m2 in range(w):
                            acc[m2] += wv * seg[m2]
                orow = out[oy]
                for m2 in range(w):
                    ox = 2 * m2 + r2
                    if ox < ow:
                        orow[ox] = _round_clamp(acc[m2])
    return out


def _tconv2x_nb(x, wq, oh, ow, tk, ts, pad):
    h, w = x.shape
    xp = np.ascontiguousarray(np.pad(x, pad, mode="edge"))
    return _tconv2x_nb_padded(xp, h, w, wq, oh, ow, tk, ts)


def _tconv2x_np(x, wq, oh, ow, tk, ts, pad):
    h, w = x.shape
    xp = np.pad(x, pad, mode="edge")
    full = np.zeros((2 * h, 2 * w), dtype=np.int64)
    for r1 in range(2):
        for r2 in range(2):
            acc = np.zeros((h, w), dtype=np.int64)
            for a in range(tk.shape[1]):
                s1 = ts[r1, a]
                for b in range(tk.shape[1]):
                    s2 = ts[r2, b]
                    acc += wq[tk[r1, a], tk[r2, b]] * xp[s1:s1 + h, s2:s2 + w]
            full[r1::2, r2::2] = acc
    return np.clip((full[:oh, :ow] + HALF) >> 16, -ACT_MAX, ACT_MAX)


@njit
def _conv_nb_padded(xp, x, wq, bq, residual, relu):
    c, h, w = x.shape
    o_ch, _, k, _ = wq.shape
    out = np.zeros((o_ch, h, w), dtype=np.int64)
    acc = np.zeros(w, dtype=np.int64)
    for o in range(o_ch):
        for y in range(h):
            acc[:] = 0
            for ci in range(c):
                for i in range(k):
                    row = xp[ci, y + i]
                    for j in range(k):
                        wv = wq[o, ci, i, j]
                        seg = row[j:j + w]
                        for xx in range(w):
                            acc[xx] += wv * seg[xx]
            orow = out[o, y]
            for xx in range(w):
                v = ((acc[xx] + HALF) >> 16) + bq[o]
                if residual:
                    v += x[o, y, xx]
                if relu and v < 0:
                    v = 0
                if v > ACT_MAX:
                    v = ACT_MAX
                elif v < -ACT_MAX:
                    v = -ACT_MAX
                orow[xx] = v
    return out


def _conv_nb(x, wq, bq, residual, relu):
    p = wq.shape[2] // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)), mode="edge") if p else x
    return _conv_nb_padded(np.ascontiguousarray(xp), x, wq, bq, residual, relu)


def _conv_np(x, wq, bq, residual, relu):
    c, h, w = x.shape
    o_ch, _, k, _ = wq.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)), mode="edge") if p else x
    acc = np.zeros((o_ch, h, w), dtype=np.int64)
    for i in range(k):
        for j in range(k):
            sl = xp[:, i:i + h, j:j + w].reshape(c, -1)
            acc += (wq[:, :, i, j] @ sl).reshape(o_ch, h, w)
    v = ((acc + HALF) >> 16) + bq[:, None, None]
    if residual:
        v = v + x
    if relu:
        v = np.maximum(v, 0)
    return np.clip(v, -ACT_MAX, ACT_MAX)


@njit
def _to_uint8_nb(x):
    c, h, w = x.shape
    out = np.zeros((h, w, c), dtype=np.uint8)
    for ch in range(c):
        for y in range(h):
            for xx in range(w):
                v = (x[ch, y, xx] * 255 + HALF) >> 16
                if v < 0:
                    v = 0
                elif v > 255:
                    v = 255
                out[y, xx, ch] = v
    return out


def _to_uint8_np(x):
    v = (x * 255 + HALF) >> 16
    return np.clip(v, 0, 255).astype(np.uint8).transpose(1, 2, 0).copy()


if USE_NUMBA:
    tconv2x_fixed_kernel = _tconv2x_nb
    conv_fixed_kernel = _conv_nb
    to_uint8 = _to_uint8_nb
else:
    tconv2x_fixed_kernel = _tconv2x_np
    conv_fixed_kernel = _conv_np
    to_uint8 = _to_uint8_np


def tap_tables(k: int):
    from .tensor import tconv_taps

    taps = tconv_taps(k)
    tk = np.array([[kk for kk, _ in ph] for ph in taps], dtype=np.int64)
    ts = np.array([[s for _, s in ph] for ph in taps], dtype=np.int64)
    return tk, ts


def tconv2x_fixed(x: np.ndarray, wq: np.ndarray, oh: int, ow: int) -> np.ndarray:
    k = wq.shape[0]
    tk, ts = tap_tables(k)
    return tconv2x_fixed_kernel(np.ascontiguousarray(x, dtype=np.int64),
                                np.ascontiguousarray(wq, dtype=np.int64), oh, ow, tk, ts, k // 4)


def conv_fixed(x: np.ndarray, wq: np.ndarray, bq: np.ndarray, residual: bool, relu: bool) -> np.ndarray:
    return conv_fixed_kernel(np.ascontiguousarray(x, dtype=np.int64),
                             np.ascontiguousarray(wq, dtype=np.int64),
                             np.ascontiguousarray(bq, dtype=np.int64), residual, relu)


def float_to_q16(a) -> np.ndarray:
    return np.rint(np.asarray(a, dtype=np.float64) * ONE).astype(np.int64)


def q16_to_float(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) / ONE
