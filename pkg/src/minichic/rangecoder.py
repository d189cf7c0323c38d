"""Byte-oriented range coder with 16-bit frequency tables.

Encoder: 64-bit ``low`` with a deferred carry byte (cache + pending 0xFF
run), 32-bit ``range`` renormalised so that ``range >= 2**24`` after every
symbol. The decoder never has to propagate carries. The always-zero lead
byte is not written. Each stream ends with a 16-bit sentinel symbol so
that desynchronisation is detected at the end of decoding. The final flush
writes only the bytes needed to pin a value inside the last interval; the
decoder reads zeros past the end.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ._jit import njit
from .fixedpoint import (TOTAL, MAX_ALPHABET, arm_fixed, clamp_mu, cum_freq, find_symbol,
                         gather_ctx_int, inv_scale_q20)

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
SENTINEL = 0xA53C
MAX_OVERRUN = 4

# decode status codes
OK = 0
DESYNC = 1
TRUNCATED = 2
TRAILING = 3
BAD_SYMBOL = 4


class RangeCoderError(ValueError):
    pass


class DesyncError(RangeCoderError):
    """Sentinel mismatch or inconsistent stream length after decoding."""


_STATUS_MESSAGES = {
    DESYNC: "sentinel mismatch: coder desynchronised or data corrupted",
    TRUNCATED: "stream truncated",
    TRAILING: "unexpected trailing bytes after the sentinel",
}


def raise_for_status(status: int) -> None:
    if status != OK:
        raise DesyncError(_STATUS_MESSAGES.get(status, f"decode failure {status}"))


# encoder state: low, range, cache, cache_size, pos, lead-byte pending
@njit
def enc_init():
    st = np.zeros(6, dtype=np.int64)
    st[1] = MASK32
    st[3] = 1
    st[5] = 1
    return st


@njit
def _emit(st, out, byte):
    if st[5] == 1:
        st[5] = 0
    else:
        out[st[4]] = byte
        st[4] += 1


@njit
def _shift_low(st, out):
    low = st[0]
    if low < 0xFF000000 or low > MASK32:
        carry = low >> 32
        temp = st[2]
        while True:
            _emit(st, out, (temp + carry) & 0xFF)
            temp = 0xFF
            st[3] -= 1
            if st[3] == 0:
                break
        st[2] = (low >> 24) & 0xFF
    st[3] += 1
    st[0] = (low & 0x00FFFFFF) << 8


@njit
def enc_put(st, out, cum, freq):
    r = st[1] >> 16
    st[0] += r * cum
    st[1] = r * freq
    while st[1] < TOP:
        st[1] = st[1] << 8
        _shift_low(st, out)


@njit
def enc_finish(st, out):
    """Write the sentinel and a minimal flush; returns the byte count."""
    enc_put(st, out, SENTINEL, 1)
    st[0] = (st[0] + 0xFFFFFF) & ~0xFFFFFF
    _shift_low(st, out)
    _shift_low(st, out)
    return st[4]


# decoder state: code, range, pos
@njit
def _next_byte(st, data):
    p = st[2]
    st[2] = p + 1
    if p < data.shape[0]:
        return np.int64(data[p])
    return np.int64(0)


@njit
def dec_init(data):
    st = np.zeros(3, dtype=np.int64)
    st[1] = MASK32
    for _ in range(4):
        st[0] = (st[0] << 8) | _next_byte(st, data)
    return st


@njit
def dec_target(st):
    t = st[0] // (st[1] >> 16)
    if t >= TOTAL:
        t = TOTAL - 1
    return t


@njit
def dec_update(st, data, cum, freq):
    r = st[1] >> 16
    st[0] -= r * cum
    st[1] = r * freq
    while st[1] < TOP:
        st[0] = ((st[0] << 8) | _next_byte(st, data)) & MASK32
        st[1] = st[1] << 8


@njit
def dec_finish(st, data):
    if dec_target(st) != SENTINEL:
        return DESYNC
    dec_update(st, data, SENTINEL, 1)
    n = data.shape[0]
    if st[2] < n:
        return TRAILING
    if st[2] > n + MAX_OVERRUN:
        return TRUNCATED
    return OK


def _buffer(n_symbols: int) -> np.ndarray:
    return np.zeros(3 * n_symbols + 32, dtype=np.uint8)


# generic symbol coding -----------------------------------------------------------

@njit
def _encode_tables(symbols, flat, starts, lengths, which, out):
    st = enc_init()
    for i in range(symbols.shape[0]):
        t = which[i]
        s = symbols[i]
        if s < 0 or s >= lengths[t] - 1:
            return -1
        base = starts[t]
        lo = flat[base + s]
        hi = flat[base + s + 1]
        if hi <= lo:
            return -1
        enc_put(st, out, lo, hi - lo)
    return enc_finish(st, out)


def check_cdf(cdf: np.ndarray) -> np.ndarray:
    cdf = np.asarray(cdf, dtype=np.int64)
    if cdf.ndim != 1 or cdf.size < 2 or cdf[0] != 0 or cdf[-1] != TOTAL:
        raise RangeCoderError(f"cumulative table must run from 0 to {TOTAL}")
    if np.any(np.diff(cdf) < 1):
        raise RangeCoderError("every symbol needs frequency >= 1")
    return cdf


def quantize_pmf(p: Sequence[float]) -> np.ndarray:
    """Cumulative 16-bit table for probabilities ``p`` with every frequency >= 1."""
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    if n < 1 or n > MAX_ALPHABET:
        raise RangeCoderError(f"alphabet size {n} outside [1, {MAX_ALPHABET}]")
    if np.any(p < 0) or p.sum() <= 0:
        raise RangeCoderError("probabilities must be non-negative with positive mass")
    c = np.concatenate([[0.0], np.cumsum(p / p.sum())])
    cum = np.floor(c * (TOTAL - n)).astype(np.int64) + np.arange(n + 1)
    cum[0], cum[-1] = 0, TOTAL
    return cum


def encode_symbols(symbols: Sequence[int], cdfs) -> bytes:
    """Range-code symbol indices; ``cdfs`` is one table or one table per symbol."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    if isinstance(cdfs, np.ndarray) and cdfs.ndim == 1:
        tables = [check_cdf(cdfs)]
        which = np.zeros(symbols.size, dtype=np.int64)
    else:
        tables = [check_cdf(c) for c in cdfs]
        if len(tables) != symbols.size:
            raise RangeCoderError("need one cumulative table per symbol")
        which = np.arange(symbols.size, dtype=np.int64)
    lengths = np.array([t.size for t in tables], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
    flat = np.concatenate(tables) if tables else np.zeros(0, dtype=np.int64)
    out = _buffer(symbols.size)
    n = _encode_tables(symbols, flat, starts, lengths, which, out)
    if n < 0:
        raise RangeCoderError("symbol outside the support of its distribution")
    return out[:n].tobytes()


def decode_symbols(data: bytes, count: int, cdf_provider: Callable[[int, list], np.ndarray]) -> list:
    """Inverse of :func:`encode_symbols`.

    ``cdf_provider(i, decoded_so_far)`` must return the table the encoder used
    for symbol i, which allows autoregressive models.
    """
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    st = dec_init(buf)
    decoded: list[int] = []
    for i in range(count):
        cdf = np.asarray(cdf_provider(i, decoded), dtype=np.int64)
        target = dec_target(st)
        s = int(np.searchsorted(cdf, target, side="right") - 1)
        s = min(max(s, 0), cdf.size - 2)
        dec_update(st, buf, int(cdf[s]), int(cdf[s + 1] - cdf[s]))
        decoded.append(s)
    raise_for_status(dec_finish(st, buf))
    return decoded


# latent grids driven by the fixed-point ARM -------------------------------------

@njit
def _arm_buffers(offsets, meta):
    width = max(offsets.shape[0], 2)
    for li in range(meta.shape[0]):
        width = max(width, meta[li, 1])
    return (np.zeros(offsets.shape[0], dtype=np.int64), np.zeros(width, dtype=np.int64),
            np.zeros(width, dtype=np.int64))


@njit
def _encode_grid_into(st, grid, amin, amax, offsets, arm_w, arm_b, meta, out, ctx, buf_a, buf_b):
    h, w = grid.shape
    n = amax - amin + 1
    for r in range(h):
        for c in range(w):
            i = grid[r, c] - amin
            if i < 0 or i >= n:
                return False
            if n == 1:
                enc_put(st, out, 0, TOTAL)
                continue
            gather_ctx_int(grid, r, c, offsets, ctx)
            mu, raw = arm_fixed(ctx, arm_w, arm_b, meta, buf_a, buf_b)
            mu = clamp_mu(mu)
            invb = inv_scale_q20(raw)
            lo = cum_freq(i, n, amin, mu, invb)
            hi = cum_freq(i + 1, n, amin, mu, invb)
            enc_put(st, out, lo, hi - lo)
    return True


@njit
def _decode_grid_into(st, data, grid, amin, amax, offsets, arm_w, arm_b, meta, ctx, buf_a, buf_b):
    h, w = grid.shape
    n = amax - amin + 1
    for r in range(h):
        for c in range(w):
            if n == 1:
                dec_update(st, data, 0, TOTAL)
                grid[r, c] = amin
                continue
            gather_ctx_int(grid, r, c, offsets, ctx)
            mu, raw = arm_fixed(ctx, arm_w, arm_b, meta, buf_a, buf_b)
            mu = clamp_mu(mu)
            invb = inv_scale_q20(raw)
            target = dec_target(st)
            i = find_symbol(target, n, amin, mu, invb)
            lo = cum_freq(i, n, amin, mu, invb)
            hi = cum_freq(i + 1, n, amin, mu, invb)
            dec_update(st, data, lo, hi - lo)
            grid[r, c] = amin + i


@njit
def encode_grid_kernel(grid, amin, amax, offsets, arm_w, arm_b, meta, out):
    st = enc_init()
    ctx, buf_a, buf_b = _arm_buffers(offsets, meta)
    if not _encode_grid_into(st, grid, amin, amax, offsets, arm_w, arm_b, meta, out, ctx, buf_a, buf_b):
        return -1
    return enc_finish(st, out)


@njit
def decode_grid_kernel(data, h, w, amin, amax, offsets, arm_w, arm_b, meta):
    grid = np.zeros((h, w), dtype=np.int64)
    st = dec_init(data)
    ctx, buf_a, buf_b = _arm_buffers(offsets, meta)
    _decode_grid_into(st, data, grid, amin, amax, offsets, arm_w, arm_b, meta, ctx, buf_a, buf_b)
    return grid, dec_finish(st, data)


@njit
def encode_pyramid_kernel(flat, shapes, amins, amaxs, offsets, arm_w, arm_b, meta, out):
    """All grids (row-major, concatenated in ``flat``) in one coder stream with one sentinel."""
    st = enc_init()
    ctx, buf_a, buf_b = _arm_buffers(offsets, meta)
    pos = 0
    for l in range(shapes.shape[0]):
        h, w = shapes[l, 0], shapes[l, 1]
        grid = flat[pos:pos + h * w].reshape(h, w)
        if not _encode_grid_into(st, grid, amins[l], amaxs[l], offsets, arm_w, arm_b, meta, out,
                                 ctx, buf_a, buf_b):
            return -1
        pos += h * w
    return enc_finish(st, out)


@njit
def decode_pyramid_kernel(data, shapes, amins, amaxs, offsets, arm_w, arm_b, meta):
    total = 0
    for l in range(shapes.shape[0]):
        total += shapes[l, 0] * shapes[l, 1]
    flat = np.zeros(total, dtype=np.int64)
    st = dec_init(data)
    ctx, buf_a, buf_b = _arm_buffers(offsets, meta)
    pos = 0
    for l in range(shapes.shape[0]):
        h, w = shapes[l, 0], shapes[l, 1]
        grid = flat[pos:pos + h * w].reshape(h, w)
        _decode_grid_into(st, data, grid, amins[l], amaxs[l], offsets, arm_w, arm_b, meta, ctx, buf_a, buf_b)
        pos += h * w
    return flat, dec_finish(st, data)


@njit
def grid_rate_kernel(grid, amin, amax, offsets, arm_w, arm_b, meta):
    """Exact cost in bits of a grid under the quantized ARM pmfs."""
    h, w = grid.shape
    n = amax - amin + 1
    if n == 1:
        return 0.0
    ctx, buf_a, buf_b = _arm_buffers(offsets, meta)
    bits = 0.0
    for r in range(h):
        for c in range(w):
            i = grid[r, c] - amin
            gather_ctx_int(grid, r, c, offsets, ctx)
            mu, raw = arm_fixed(ctx, arm_w, arm_b, meta, buf_a, buf_b)
            mu = clamp_mu(mu)
            invb = inv_scale_q20(raw)
            freq = cum_freq(i + 1, n, amin, mu, invb) - cum_freq(i, n, amin, mu, invb)
            bits += 16.0 - np.log2(freq)
    return bits


@njit
def encode_laplace_kernel(values, amin, amax, mu_q16, invb_q20, out):
    """Code i.i.d. integers under one fixed discrete Laplace."""
    n = amax - amin + 1
    st = enc_init()
    for k in range(values.shape[0]):
        i = values[k] - amin
        if i < 0 or i >= n:
            return -1
        lo = cum_freq(i, n, amin, mu_q16, invb_q20)
        hi = cum_freq(i + 1, n, amin, mu_q16, invb_q20)
        enc_put(st, out, lo, hi - lo)
    return enc_finish(st, out)


@njit
def decode_laplace_kernel(data, count, amin, amax, mu_q16, invb_q20):
    n = amax - amin + 1
    values = np.zeros(count, dtype=np.int64)
    st = dec_init(data)
    for k in range(count):
        target = dec_target(st)
        i = find_symbol(target, n, amin, mu_q16, invb_q20)
        lo = cum_freq(i, n, amin, mu_q16, invb_q20)
        hi = cum_freq(i + 1, n, amin, mu_q16, invb_q20)
        dec_update(st, data, lo, hi - lo)
        values[k] = amin + i
    return values, dec_finish(st, data)


def check_alphabet(amin: int, amax: int) -> None:
    if amax < amin or amax - amin + 1 > MAX_ALPHABET:
        raise RangeCoderError(f"alphabet [{amin}, {amax}] exceeds {MAX_ALPHABET} symbols")


def buffer_for(n_symbols: int) -> np.ndarray:
    return _buffer(n_symbols)


@njit
def encode_laplace_segments(values, ends, amins, amaxs, invbs, out):
    """One stream of consecutive segments, each i.i.d. zero-mean Laplace.

    Segment s covers values[ends[s-1]:ends[s]] with alphabet [amins[s], amaxs[s]].
    """
    st = enc_init()
    start = 0
    for s in range(ends.shape[0]):
        amin = amins[s]
        n = amaxs[s] - amin + 1
        for k in range(start, ends[s]):
            i = values[k] - amin
            if i < 0 or i >= n:
                return -1
            lo = cum_freq(i, n, amin, 0, invbs[s])
            hi = cum_freq(i + 1, n, amin, 0, invbs[s])
            enc_put(st, out, lo, hi - lo)
        start = ends[s]
    return enc_finish(st, out)


@njit
def decode_laplace_segments(data, ends, amins, amaxs, invbs):
    values = np.zeros(ends[-1] if ends.shape[0] else 0, dtype=np.int64)
    st = dec_init(data)
    start = 0
    for s in range(ends.shape[0]):
        amin = amins[s]
        n = amaxs[s] - amin + 1
        for k in range(start, ends[s]):
            target = dec_target(st)
            i = find_symbol(target, n, amin, 0, invbs[s])
            lo = cum_freq(i, n, amin, 0, invbs[s])
            hi = cum_freq(i + 1, n, amin, 0, invbs[s])
            dec_update(st, data, lo, hi - lo)
            values[k] = amin + i
        start = ends[s]
    return values, dec_finish(st, data)


@njit
def laplace_segments_bits(values, ends, amins, amaxs, invbs):
    bits = 0.0
    start = 0
    for s in range(ends.shape[0]):
        amin = amins[s]
        n = amaxs[s] - amin + 1
        for k in range(start, ends[s]):
            i = values[k] - amin
            freq = cum_freq(i + 1, n, amin, 0, invbs[s]) - cum_freq(i, n, amin, 0, invbs[s])
            bits += 16.0 - np.log2(freq)
        start = ends[s]
    return bits
