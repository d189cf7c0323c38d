"""Auto-regressive probability model over latent grids.

Each latent is modelled by a discrete Laplace whose location and log-scale
come from a small MLP fed with already-decoded causal neighbours of the same
grid. One set of MLP weights is shared by all grids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import fixedpoint as fx
from . import rangecoder as rc
from .tensor import DTYPE, LayerSpec, Parameters, Tensor, concat, custom_op, forward_layer, reshape

# nearest-causal-first; templates of size 8/16/24 are prefixes
MASTER_OFFSETS: tuple = (
    (0, -1), (0, -2), (-1, 0), (-1, -1), (-1, 1), (-1, -2), (-1, 2), (0, -3),
    (-2, 0), (-2, -1), (-2, 1), (-1, -3), (-1, 3), (-2, -2), (-2, 2), (-2, -3),
    (-2, 3), (-3, 0), (-3, -1), (-3, 1), (-3, -2), (-3, 2), (0, -4), (-1, -4),
)
PAD_TOP = 3
PAD_SIDE = 4

LOG_SCALE_MIN = math.log(fx.SCALE_MIN)
LOG_SCALE_MAX = math.log(fx.SCALE_MAX)
PMF_FLOOR = 2.0 ** -16


@dataclass(frozen=True)
class ContextTemplate:
    size: int = 8

    def __post_init__(self):
        if self.size not in (8, 16, 24):
            raise ValueError(f"context size must be 8, 16 or 24, got {self.size}")

    @property
    def offsets(self) -> tuple:
        return MASTER_OFFSETS[:self.size]

    def offsets_array(self) -> np.ndarray:
        return np.array(self.offsets, dtype=np.int64)


@dataclass(frozen=True)
class LaplaceParams:
    mu: float
    b: float

    def __post_init__(self):
        if not fx.SCALE_MIN <= self.b <= fx.SCALE_MAX:
            raise ValueError(f"scale {self.b} outside [{fx.SCALE_MIN}, {fx.SCALE_MAX}]")


def gather_context(grid: np.ndarray, pos: tuple, tmpl: ContextTemplate) -> np.ndarray:
    r, c = pos
    h, w = grid.shape
    if not (0 <= r < h and 0 <= c < w):
        raise IndexError(f"position {pos} outside grid {grid.shape}")
    out = np.zeros(tmpl.size, dtype=np.float64)
    for k, (dy, dx) in enumerate(tmpl.offsets):
        rr, cc = r + dy, c + dx
        if 0 <= rr < h and 0 <= cc < w:
            out[k] = grid[rr, cc]
    return out


def gather_contexts(grid: Tensor, tmpl: ContextTemplate) -> Tensor:
    """Context matrix (h*w, size) of a whole grid in raster order, zero outside."""
    h, w = grid.shape
    padded = np.zeros((h + PAD_TOP, w + 2 * PAD_SIDE), dtype=grid.data.dtype)
    padded[PAD_TOP:, PAD_SIDE:PAD_SIDE + w] = grid.data
    offsets = tmpl.offsets
    cols = np.empty((h * w, len(offsets)), dtype=grid.data.dtype)
    for k, (dy, dx) in enumerate(offsets):
        cols[:, k] = padded[PAD_TOP + dy:PAD_TOP + dy + h, PAD_SIDE + dx:PAD_SIDE + dx + w].ravel()

    def backward(g):
        gp = np.zeros_like(padded)
        for k, (dy, dx) in enumerate(offsets):
            gp[PAD_TOP + dy:PAD_TOP + dy + h, PAD_SIDE + dx:PAD_SIDE + dx + w] += g[:, k].reshape(h, w)
        return (gp[PAD_TOP:, PAD_SIDE:PAD_SIDE + w],)
    return custom_op(cols, (grid,), backward)


def arm_mlp(ctx: Tensor, psi: Parameters, arch: Sequence[LayerSpec]) -> Tensor:
    """Raw (n, 2) ARM outputs: location and log-scale before clamping."""
    if ctx.shape[1] != arch[0].in_feat:
        raise ValueError(f"context of size {ctx.shape[1]} for ARM expecting {arch[0].in_feat}")
    x = ctx
    for i, spec in enumerate(arch):
        x = forward_layer(spec, psi, x, f"arm.{i}", final=i == len(arch) - 1)
    return x


def arm_forward(ctx, psi: Parameters, arch: Sequence[LayerSpec]) -> LaplaceParams:
    ctx = np.asarray(ctx, dtype=DTYPE).reshape(1, -1)
    out = arm_mlp(Tensor(ctx), psi, arch).data[0].astype(np.float64)
    return LaplaceParams(float(out[0]), float(np.exp(np.clip(out[1], LOG_SCALE_MIN, LOG_SCALE_MAX))))


def laplace_cdf(t, mu, b):
    z = (np.asarray(t, dtype=np.float64) - mu) / b
    return np.where(z < 0, 0.5 * np.exp(np.minimum(z, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(z, 0.0)))


def discrete_laplace_pmf(lp: LaplaceParams, v: int) -> float:
    """P(v) = F(v + 0.5) - F(v - 0.5), floored at 2^-16."""
    p = float(laplace_cdf(v + 0.5, lp.mu, lp.b) - laplace_cdf(v - 0.5, lp.mu, lp.b))
    return max(p, PMF_FLOOR)


def discrete_laplace_table(lp: LaplaceParams, amin: int, amax: int) -> np.ndarray:
    """Probabilities over [amin, amax] with tails folded into the end symbols."""
    edges = np.arange(amin, amax + 2) - 0.5
    F = laplace_cdf(edges, lp.mu, lp.b)
    F[0], F[-1] = 0.0, 1.0
    return np.diff(F)


def _interval_prob(x, mu, log_b):
    """P and its partials wrt x, mu, log_b for the unit interval centred on x."""
    b = np.exp(log_b)
    t1 = x - 0.5 - mu
    t2 = x + 0.5 - mu
    e1 = np.exp(-np.abs(t1) / b)
    e2 = np.exp(-np.abs(t2) / b)
    F1 = np.where(t1 < 0, 0.5 * e1, 1.0 - 0.5 * e1)
    F2 = np.where(t2 < 0, 0.5 * e2, 1.0 - 0.5 * e2)
    p = F2 - F1
    # straddling the location: 1 - tails, avoids cancellation
    straddle = (t1 < 0) & (t2 >= 0)
    p = np.where(straddle, 1.0 - 0.5 * e1 - 0.5 * e2, p)
    f1 = 0.5 * e1 / b
    f2 = 0.5 * e2 / b
    dp_dx = f2 - f1
    dp_dlogb = -(t2 * f2 - t1 * f1)
    return p, dp_dx, -dp_dx, dp_dlogb


def laplace_rate(values: Tensor, raw: Tensor) -> Tensor:
    """Total bits -sum log2 P(values | raw) with P floored at 2^-16.

    values: (n,) proxy latents; raw: (n, 2) ARM outputs (location, log-scale).
    Computed in float64 internally.
    """
    x = values.data.astype(np.float64)
    mu = raw.data[:, 0].astype(np.float64)
    lr = raw.data[:, 1].astype(np.float64)
    log_b = np.clip(lr, LOG_SCALE_MIN, LOG_SCALE_MAX)
    p, dx, dmu, dlb = _interval_prob(x, mu, log_b)
    live = p > PMF_FLOOR
    p = np.where(live, p, PMF_FLOOR)
    bits = -np.log2(p).sum()

    def backward(g):
        scale = float(g) * np.where(live, -1.0 / (p * math.log(2.0)), 0.0)
        in_range = (lr > LOG_SCALE_MIN) & (lr < LOG_SCALE_MAX)
        graw = np.stack([scale * dmu, scale * dlb * in_range], axis=1)
        return (scale * dx).astype(values.data.dtype), graw.astype(raw.data.dtype)
    return custom_op(np.asarray(bits, dtype=raw.data.dtype), (values, raw), backward)


def pyramid_rate(proxies: Sequence[Tensor], psi: Parameters, arch: Sequence[LayerSpec],
                 tmpl: ContextTemplate) -> Tensor:
    """Differentiable total rate (bits) of a list of proxy grids."""
    ctx = concat([gather_contexts(p, tmpl) for p in proxies], axis=0)
    vals = concat([reshape(p, (p.size,)) for p in proxies], axis=0)
    return laplace_rate(vals, arm_mlp(ctx, psi, arch))


# fixed-point view used by the entropy coder -----------------------------------

@dataclass
class FixedArm:
    """Integer ARM weights packed for the coding kernels."""

    weights: np.ndarray
    biases: np.ndarray
    meta: np.ndarray
    offsets: np.ndarray

    @classmethod
    def from_float(cls, psi: Parameters, arch: Sequence[LayerSpec]) -> "FixedArm":
        """Round float weights to Q16.16 (the bitstream path dequantizes exactly first)."""
        ws, bs, meta = [], [], []
        woff = boff = 0
        for i, spec in enumerate(arch):
            w = fx.float_to_q16(psi[f"arm.{i}.w"].data).ravel()
            b = fx.float_to_q16(psi[f"arm.{i}.b"].data)
            meta.append((spec.in_feat, spec.out_feat, int(spec.residual), woff, boff))
            ws.append(w)
            bs.append(b)
            woff += w.size
            boff += b.size
        return cls(np.concatenate(ws), np.concatenate(bs), np.array(meta, dtype=np.int64),
                   ContextTemplate(arch[0].in_feat).offsets_array())

    def grid_params(self, grid: np.ndarray) -> np.ndarray:
        """(h, w, 2) integer (mu, raw) for every position of an integer grid."""
        return fx.arm_fixed_grid(np.ascontiguousarray(grid, dtype=np.int64), self.offsets,
                                 self.weights, self.biases, self.meta)


def grid_bounds(grid: np.ndarray) -> tuple[int, int]:
    return int(grid.min()), int(grid.max())


def rate_bits(grids: Sequence, psi, arch: Optional[Sequence[LayerSpec]] = None,
              tmpl: Optional[ContextTemplate] = None, exact: bool = False) -> float:
    """Total latent rate in bits.

    ``exact=False``: float model, P = F(v+.5) - F(v-.5) floored at 2^-16
    (``psi`` is a Parameters, ``arch`` the ARM layer list).
    ``exact=True``: cost under the quantized 16-bit pmfs actually used by the
    range coder, with per-grid alphabets [min, max] (``psi`` is a FixedArm).
    """
    if exact:
        if not isinstance(psi, FixedArm):
            raise TypeError("exact rate needs a FixedArm")
        total = 0.0
        for g in grids:
            g = np.ascontiguousarray(g, dtype=np.int64)
            amin, amax = grid_bounds(g)
            rc.check_alphabet(amin, amax)
            total += rc.grid_rate_kernel(g, amin, amax, psi.offsets, psi.weights, psi.biases, psi.meta)
        return float(total)
    tmpl = tmpl or ContextTemplate(arch[0].in_feat)
    proxies = [Tensor(np.asarray(g, dtype=DTYPE)) for g in grids]
    return float(pyramid_rate(proxies, psi, arch, tmpl).data)


def encode_grid(grid: np.ndarray, arm: FixedArm) -> tuple[bytes, int, int]:
    g = np.ascontiguousarray(grid, dtype=np.int64)
    amin, amax = grid_bounds(g)
    rc.check_alphabet(amin, amax)
    out = rc.buffer_for(g.size)
    n = rc.encode_grid_kernel(g, amin, amax, arm.offsets, arm.weights, arm.biases, arm.meta, out)
    if n < 0:
        raise rc.RangeCoderError("latent outside its alphabet")
    return out[:n].tobytes(), amin, amax


def decode_grid(data: bytes, shape: tuple, amin: int, amax: int, arm: FixedArm) -> np.ndarray:
    rc.check_alphabet(amin, amax)
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    grid, status = rc.decode_grid_kernel(buf, shape[0], shape[1], amin, amax, arm.offsets,
                                         arm.weights, arm.biases, arm.meta)
    rc.raise_for_status(status)
    return grid.astype(np.int32)


def encode_pyramid(grids: Sequence[np.ndarray], arm: FixedArm) -> tuple[bytes, list]:
    """Code every grid in one range-coder stream. Returns (bytes, per-grid (min, max))."""
    gs = [np.ascontiguousarray(g, dtype=np.int64) for g in grids]
    bounds = [grid_bounds(g) for g in gs]
    for lo, hi in bounds:
        rc.check_alphabet(lo, hi)
    flat = np.concatenate([g.ravel() for g in gs]) if gs else np.zeros(0, dtype=np.int64)
    shapes = np.array([g.shape for g in gs], dtype=np.int64).reshape(-1, 2)
    amins = np.array([b[0] for b in bounds], dtype=np.int64)
    amaxs = np.array([b[1] for b in bounds], dtype=np.int64)
    out = rc.buffer_for(flat.size)
    n = rc.encode_pyramid_kernel(flat, shapes, amins, amaxs, arm.offsets, arm.weights, arm.biases, arm.meta,
                                 out)
    if n < 0:
        raise rc.RangeCoderError("latent outside its alphabet")
    return out[:n].tobytes(), bounds


def decode_pyramid(data: bytes, shapes: Sequence[tuple], bounds: Sequence[tuple], arm: FixedArm) -> list:
    for lo, hi in bounds:
        rc.check_alphabet(lo, hi)
    shp = np.array(shapes, dtype=np.int64).reshape(-1, 2)
    amins = np.array([b[0] for b in bounds], dtype=np.int64)
    amaxs = np.array([b[1] for b in bounds], dtype=np.int64)
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    flat, status = rc.decode_pyramid_kernel(buf, shp, amins, amaxs, arm.offsets, arm.weights, arm.biases,
                                            arm.meta)
    rc.raise_for_status(status)
    grids, pos = [], 0
    for h, w in shp:
        grids.append(flat[pos:pos + h * w].reshape(h, w).astype(np.int32))
        pos += h * w
    return grids
