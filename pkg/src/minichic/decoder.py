"""Decoder: architecture registry, float and fixed-point pipelines, MAC accounting.

Pipeline: integer latent grids -> shared stride-2 transpose conv applied l
times to grid l -> L-channel dense tensor -> synthesis convs -> RGB.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import fixedpoint as fx
from .arm import ContextTemplate, FixedArm, decode_pyramid
from .latent import grid_shape
from .tensor import (DTYPE, Conv, ConvR, LayerSpec, Lin, LinR, Parameters, TConv, Tensor,
                     count_params, forward_layer, init_layer, reshape, stack, tconv2x)


@dataclass(frozen=True)
class DecoderArch:
    id: int
    arm: tuple
    ups: tuple
    synth: tuple

    @property
    def name(self) -> str:
        return f"A{self.id}"

    @property
    def context_size(self) -> int:
        return self.arm[0].in_feat

    @property
    def ups_kernel(self) -> int:
        return self.ups[0].kernel

    @property
    def synth_in(self) -> int:
        return self.synth[0].in_feat

    @property
    def layers(self) -> tuple:
        return self.arm + self.ups + self.synth

    def n_params(self) -> int:
        return count_params(self.layers)


ARCHS: dict[int, DecoderArch] = {
    300: DecoderArch(300, (LinR(8), Lin(8, 2)), (TConv(4),),
                     (Conv(7, 8, 1), Conv(8, 3, 1), ConvR(3, 3))),
    545: DecoderArch(545, (LinR(8), LinR(8), Lin(8, 2)), (TConv(4),),
                     (Conv(7, 16, 1), Conv(16, 3, 1), ConvR(3, 3), ConvR(3, 3))),
    1079: DecoderArch(1079, (LinR(16), LinR(16), Lin(16, 2)), (TConv(4),),
                      (Conv(7, 16, 1), Conv(16, 3, 1), ConvR(3, 3), ConvR(3, 3))),
    2300: DecoderArch(2300, (LinR(24), LinR(24), Lin(24, 2)), (TConv(8),),
                      (Conv(7, 40, 1), Conv(40, 3, 1), ConvR(3, 3), ConvR(3, 3))),
}
ARCH_CODES = {300: 0, 545: 1, 1079: 2, 2300: 3}
CODE_ARCHS = {v: k for k, v in ARCH_CODES.items()}


def get_arch(arch) -> DecoderArch:
    if isinstance(arch, DecoderArch):
        return arch
    key = int(str(arch).lstrip("Aa"))
    try:
        return ARCHS[key]
    except KeyError:
        raise ValueError(f"unknown decoder architecture {arch!r}; choose from {sorted(ARCHS)}") from None


MODULES = ("arm", "ups", "synth")


def upsampling_kernel(k: int) -> np.ndarray:
    """Separable interpolator: bilinear for k=4, renormalised Lanczos-2 for k=8."""
    dist = np.abs(np.arange(k) - (k - 1) / 2.0) / 2.0
    if k == 4:
        taps = 1.0 - dist
    elif k == 8:
        taps = np.sinc(dist) * np.sinc(dist / 2.0)
    else:
        raise ValueError(f"no interpolator for kernel {k}")
    taps[0::2] /= taps[0::2].sum()
    taps[1::2] /= taps[1::2].sum()
    return np.outer(taps, taps).astype(DTYPE)


@dataclass
class DecoderParams:
    psi: Parameters
    upsilon: Parameters
    theta: Parameters
    arch: DecoderArch

    @classmethod
    def init(cls, arch, seed: int = 0) -> "DecoderParams":
        arch = get_arch(arch)
        rng = np.random.default_rng(seed)
        psi, upsilon, theta = Parameters(), Parameters(), Parameters()
        for i, spec in enumerate(arch.arm):
            init_layer(spec, f"arm.{i}", rng, psi)
        upsilon["ups.0.w"] = Tensor(upsampling_kernel(arch.ups_kernel), requires_grad=True)
        for i, spec in enumerate(arch.synth):
            init_layer(spec, f"synth.{i}", rng, theta)
        return cls(psi, upsilon, theta, arch)

    def module(self, name: str) -> Parameters:
        return {"arm": self.psi, "ups": self.upsilon, "synth": self.theta}[name]

    def all(self) -> Parameters:
        return Parameters([*self.psi.items(), *self.upsilon.items(), *self.theta.items()])

    def count(self) -> int:
        return self.psi.count() + self.upsilon.count() + self.theta.count()

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.psi.copy(), self.upsilon.copy(), self.theta.copy(), self.arch)

    def check(self) -> None:
        for name, specs in (("arm", self.arch.arm), ("synth", self.arch.synth)):
            params = self.module(name)
            for i, spec in enumerate(specs):
                if params[f"{name}.{i}.w"].shape != spec.weight_shape():
                    raise ValueError(f"{name}.{i}: shape mismatch with {spec}")
        k = self.arch.ups_kernel
        if self.upsilon["ups.0.w"].shape != (k, k):
            raise ValueError("upsampling kernel shape mismatch")


@dataclass
class ComplexityReport:
    kappa_dec: float
    shares: dict
    kappa_enc: float = 0.0
    n_iters: int = 0
    timings: dict = field(default_factory=dict)
    macs: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"kappa_dec": self.kappa_dec, "shares": dict(self.shares), "kappa_enc": self.kappa_enc,
                "n_iters": self.n_iters, "timings": dict(self.timings)}


# float (trainable) pipeline -----------------------------------------------------

def _dense_channels(chans: list, arch: DecoderArch, H: int, W: int) -> Tensor:
    if len(chans) > arch.synth_in:
        raise ValueError(f"{len(chans)} latent grids but synthesis takes {arch.synth_in} channels")
    while len(chans) < arch.synth_in:
        chans.append(Tensor(np.zeros((H, W), dtype=DTYPE)))
    return reshape(stack(chans, axis=0), (1, arch.synth_in, H, W))


def upsample(grids: Sequence, upsilon: Parameters, arch, H: int, W: int) -> Tensor:
    """Dense (1, C, H, W) tensor; grid l goes through the shared kernel l times.

    Missing channels (fewer grids than synthesis inputs) are zeros.
    """
    arch = get_arch(arch)
    grids = getattr(grids, "grids", grids)
    w = upsilon["ups.0.w"]
    chans = []
    for l, g in enumerate(grids):
        x = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=DTYPE))
        for j in range(l - 1, -1, -1):
            x = tconv2x(x, w, *grid_shape(H, W, j))
        chans.append(x)
    return _dense_channels(chans, arch, H, W)


def synthesis_net(dense: Tensor, theta: Parameters, arch) -> Tensor:
    arch = get_arch(arch)
    if dense.data.ndim != 4 or dense.shape[1] != arch.synth_in:
        raise ValueError(f"synthesis expects {arch.synth_in} channels, got {dense.shape}")
    x = dense
    for i, spec in enumerate(arch.synth):
        x = forward_layer(spec, theta, x, f"synth.{i}", final=i == len(arch.synth) - 1)
    return x


def synthesize(dense: Tensor, theta: Parameters, arch) -> np.ndarray:
    """RGB image (3, H, W) clamped to [0, 1]."""
    return np.clip(synthesis_net(dense, theta, arch).data[0], 0.0, 1.0)


def to_uint8(img01: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8 (round half up)."""
    return np.clip(np.floor(np.asarray(img01, dtype=np.float64) * 255.0 + 0.5), 0, 255
                   ).astype(np.uint8).transpose(1, 2, 0).copy()


def reconstruct_float(params: DecoderParams, grids: Sequence, H: int, W: int) -> np.ndarray:
    """Float reference decode of integer grids to an 8-bit image."""
    dense = upsample(grids, params.upsilon, params.arch, H, W)
    return to_uint8(synthesize(dense, params.theta, params.arch))


# fixed-point pipeline -----------------------------------------------------------

@dataclass
class FixedDecoder:
    arch: DecoderArch
    arm: FixedArm
    ups_w: np.ndarray
    synth: list

    @classmethod
    def from_params(cls, params: DecoderParams) -> "FixedDecoder":
        """Q16.16 copy of the parameters (exact for dequantized bitstream weights)."""
        arch = params.arch
        synth = []
        for i, spec in enumerate(arch.synth):
            w = fx.float_to_q16(params.theta[f"synth.{i}.w"].data)
            b = fx.float_to_q16(params.theta[f"synth.{i}.b"].data)
            synth.append((w, b, spec.residual, i < len(arch.synth) - 1))
        return cls(arch, FixedArm.from_float(params.psi, arch.arm),
                   fx.float_to_q16(params.upsilon["ups.0.w"].data), synth)

    def upsample(self, grids: Sequence, H: int, W: int) -> np.ndarray:
        chans = []
        for l, g in enumerate(grids):
            x = np.asarray(g, dtype=np.int64) << fx.FRAC_BITS
            for j in range(l - 1, -1, -1):
                x = fx.tconv2x_fixed(x, self.ups_w, *grid_shape(H, W, j))
            chans.append(x)
        if len(chans) > self.arch.synth_in:
            raise ValueError(f"{len(chans)} latent grids but synthesis takes {self.arch.synth_in} channels")
        while len(chans) < self.arch.synth_in:
            chans.append(np.zeros((H, W), dtype=np.int64))
        return np.stack(chans)

    def synthesize(self, dense: np.ndarray) -> np.ndarray:
        x = dense
        for w, b, residual, relu in self.synth:
            x = fx.conv_fixed(x, w, b, residual, relu)
        return fx.to_uint8(np.ascontiguousarray(x))

    def reconstruct(self, grids: Sequence, H: int, W: int, timings: Optional[dict] = None) -> np.ndarray:
        t0 = time.perf_counter()
        dense = self.upsample(grids, H, W)
        t1 = time.perf_counter()
        img = self.synthesize(dense)
        t2 = time.perf_counter()
        if timings is not None:
            timings["upsample"] = (t1 - t0) * 1e3
            timings["synthesis"] = (t2 - t1) * 1e3
        return img


# complexity -------------------------------------------------------------------------

def mac_per_pixel(arch, H: Optional[int] = 512, W: Optional[int] = 768, L: int = 7) -> ComplexityReport:
    """Forward MACs per decoded pixel, biases free.

    With H, W given the real ceil-divided grid sizes are used (identical to
    the dyadic series when both are multiples of 2^(L-1)); with H=W=None the
    asymptotic series sum_l 4^-l is used.
    """
    arch = get_arch(arch)
    arm_per_sample = sum(s.in_feat * s.out_feat for s in arch.arm)
    ups_per_sample = arch.ups_kernel ** 2 / 4.0
    synth_per_px = sum(s.in_feat * s.out_feat * s.kernel ** 2 for s in arch.synth)
    if H is None or W is None:
        lat = sum(4.0 ** -l for l in range(L))
        ups = sum(sum(4.0 ** -j for j in range(l)) for l in range(1, L))
    else:
        npx = float(H * W)
        sizes = [np.prod(grid_shape(H, W, l)) / npx for l in range(L)]
        lat = sum(sizes)
        ups = sum(sum(sizes[j] for j in range(l)) for l in range(1, L))
    macs = {"arm": arm_per_sample * lat, "upsampling": ups_per_sample * ups, "synthesis": float(synth_per_px)}
    total = sum(macs.values())
    return ComplexityReport(kappa_dec=total, shares={k: v / total for k, v in macs.items()}, macs=macs)


# bitstream decoding ----------------------------------------------------------------

class DecodeError(ValueError):
    pass


def decode_image(data: bytes, shared: Optional[DecoderParams] = None):
    """Decode a bitstream to an (H, W, 3) uint8 image and a ComplexityReport.

    ``shared`` supplies the decoder parameters for streams produced in
    non-overfitted mode (no parameter section).
    """
    from . import bitstream as bs
    from .rangecoder import RangeCoderError

    t_start = time.perf_counter()
    try:
        stream = bs.parse(data)
        hdr = stream.header
        arch = get_arch(CODE_ARCHS[hdr.arch_code])
        if hdr.no_params:
            if shared is None:
                raise DecodeError("stream carries no decoder parameters; shared parameters required")
            if shared.arch.id != arch.id:
                raise DecodeError(f"stream uses {arch.name}, shared parameters are {shared.arch.name}")
            params = shared
        else:
            params = bs.decode_params(stream).dequantize()
        fdec = FixedDecoder.from_params(params)
        t0 = time.perf_counter()
        shapes = [grid_shape(hdr.H, hdr.W, l) for l in range(hdr.L)]
        grids = decode_pyramid(stream.latents, shapes, hdr.bounds, fdec.arm)
        t1 = time.perf_counter()
    except (bs.BitstreamError, RangeCoderError) as exc:
        raise DecodeError(str(exc)) from exc
    timings = {"arm": (t1 - t0) * 1e3}
    img = fdec.reconstruct(grids, hdr.H, hdr.W, timings)
    timings["total"] = (time.perf_counter() - t_start) * 1e3
    report = mac_per_pixel(arch, hdr.H, hdr.W, hdr.L)
    report.timings = timings
    return img, report
