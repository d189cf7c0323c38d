"""Latent pyramid and quantization (hard rounding and differentiable proxies)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import DTYPE, Tensor, custom_op

log = logging.getLogger(__name__)

LATENT_MIN = -(1 << 15)
LATENT_MAX = (1 << 15) - 1
MAX_LEVELS = 10


def grid_shape(h: int, w: int, level: int) -> tuple[int, int]:
    return -(-h // (1 << level)), -(-w // (1 << level))


def max_levels(h: int, w: int) -> int:
    """Number of levels whose floor-divided size is still non-empty."""
    return min(MAX_LEVELS, int(math.floor(math.log2(min(h, w)))) + 1)


@dataclass
class LatentPyramid:
    H: int
    W: int
    L: int
    grids: list
    shadow: Optional[list] = None
    requested_L: Optional[int] = None

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [g.shape for g in self.grids]

    @property
    def n_latents(self) -> int:
        return sum(g.size for g in self.grids)

    @property
    def encoding(self) -> bool:
        return self.shadow is not None

    def finalize(self) -> "LatentPyramid":
        """Drop the continuous shadow (end of encoding)."""
        return LatentPyramid(self.H, self.W, self.L, [g.copy() for g in self.grids], None,
                             self.requested_L)


def init_pyramid(H: int, W: int, L: int = 7, encoding: bool = True) -> LatentPyramid:
    """All-zero pyramid with grid l of size ceil(H/2^l) x ceil(W/2^l).

    L is clamped (with a warning) to the number of levels that would remain
    non-empty under plain halving.
    """
    if H < 1 or W < 1:
        raise ValueError(f"image size must be positive, got {H}x{W}")
    if not 1 <= L <= MAX_LEVELS:
        raise ValueError(f"L must be in [1, {MAX_LEVELS}], got {L}")
    requested = L
    L = min(L, max_levels(H, W))
    if L != requested:
        log.warning("clamping latent levels from %d to %d for a %dx%d image", requested, L, H, W)
    shapes = [grid_shape(H, W, l) for l in range(L)]
    grids = [np.zeros(s, dtype=np.int32) for s in shapes]
    shadow = [np.zeros(s, dtype=DTYPE) for s in shapes] if encoding else None
    return LatentPyramid(H, W, L, grids, shadow, requested)


@dataclass(frozen=True)
class QuantMode:
    kind: str = "HardRound"
    temperature: float = 0.3

    def __post_init__(self):
        if self.kind not in ("Noise", "SoftRound", "HardRound"):
            raise ValueError(f"unknown quantization mode {self.kind!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class SaturationFlag:
    count: int = 0

    def __bool__(self) -> bool:
        return self.count > 0


def hard_round(y: np.ndarray, flag: Optional[SaturationFlag] = None) -> np.ndarray:
    """Nearest integer, ties to even, saturated to the signed 16-bit range."""
    if not np.all(np.isfinite(y)):
        raise ValueError("cannot quantize non-finite latents")
    r = np.rint(y)
    over = (r < LATENT_MIN) | (r > LATENT_MAX)
    if over.any():
        if flag is not None:
            flag.count += int(over.sum())
        log.warning("%d latent values saturated to 16 bits", int(over.sum()))
        r = np.clip(r, LATENT_MIN, LATENT_MAX)
    return r.astype(np.int32)


def soft_round(y: np.ndarray, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Smooth rounding s(y) and its derivative; s -> round(y) as T -> 0."""
    y64 = y.astype(np.float64)
    base = np.floor(y64) + 0.5
    r = y64 - base
    denom = 2.0 * np.tanh(0.5 / temperature)
    t = np.tanh(r / temperature)
    value = base + t / denom
    deriv = (1.0 - t * t) / (temperature * denom)
    out = y.dtype if np.issubdtype(y.dtype, np.floating) else DTYPE
    return value.astype(out), deriv.astype(out)


def quantize(y: Tensor, mode: QuantMode, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Quantization proxy applied to one continuous latent tensor.

    Noise adds U(-0.5, 0.5) (identity gradient); SoftRound soft-rounds, adds the
    same noise and soft-rounds again (differentiable);
    HardRound rounds half to even with a straight-through gradient.
    """
    if mode.kind == "Noise":
        rng = rng if rng is not None else np.random.default_rng()
        u = rng.uniform(-0.5, 0.5, y.shape).astype(y.data.dtype)
        return custom_op(y.data + u, (y,), lambda g: (g,))
    if mode.kind == "SoftRound":
        # s(s(y) + u): without the noise the rate model can collapse onto non-integer values
        rng = rng if rng is not None else np.random.default_rng()
        inner, d_inner = soft_round(y.data, mode.temperature)
        u = rng.uniform(-0.5, 0.5, y.shape).astype(y.data.dtype)
        value, d_outer = soft_round(inner + u, mode.temperature)
        deriv = d_inner * d_outer
        return custom_op(value, (y,), lambda g: (g * deriv,))
    value = np.clip(np.rint(y.data), LATENT_MIN, LATENT_MAX).astype(y.data.dtype)
    return custom_op(value, (y,), lambda g: (g,))


def quantize_pyramid(shadow: list, mode: QuantMode, seed: Optional[int] = None) -> list:
    """Apply ``mode`` to every grid; HardRound returns int32 grids, others float proxies."""
    if mode.kind == "HardRound":
        return [hard_round(s) for s in shadow]
    rng = np.random.default_rng(seed)
    return [quantize(Tensor(s), mode, rng).data for s in shadow]
