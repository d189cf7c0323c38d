"""Container format: header, quantized decoder parameters, coded latent grids.

Layout (little-endian) is documented in docs/bitstream.md.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import rangecoder as rc
from .arm import FixedArm, encode_pyramid
from .decoder import ARCH_CODES, CODE_ARCHS, MODULES, DecoderArch, DecoderParams, get_arch
from .latent import LATENT_MAX, LATENT_MIN, MAX_LEVELS, grid_shape
from .tensor import DTYPE, Parameters, Tensor

MAGIC = b"MCH1"
VERSION = 1
FLAG_NO_PARAMS = 0x01

STEP_EXP_MIN = -12
STEP_EXP_MAX = -4
DEFAULT_STEP_EXP = -8
PARAM_INT_MAX = 16383
SCALE_Q4_MAX = 256 * 16

_FIXED = struct.Struct("<4sBBHHBB")
_STEPS = struct.Struct("<3b")
_MODEL = struct.Struct("<HH")
_BOUND = struct.Struct("<hh")
_U32 = struct.Struct("<I")


class BitstreamError(ValueError):
    pass


class TruncatedError(BitstreamError):
    pass


@dataclass
class Header:
    H: int
    W: int
    L: int
    arch_code: int
    bounds: list
    no_params: bool = False
    step_exps: tuple = (DEFAULT_STEP_EXP,) * 3
    param_models: tuple = ((1, 0),) * 3

    @property
    def arch(self) -> DecoderArch:
        return get_arch(CODE_ARCHS[self.arch_code])

    def validate(self) -> None:
        if not (1 <= self.H <= 0xFFFF and 1 <= self.W <= 0xFFFF):
            raise BitstreamError(f"image size {self.H}x{self.W} out of range")
        if not 1 <= self.L <= MAX_LEVELS:
            raise BitstreamError(f"bad level count {self.L}")
        if self.arch_code not in CODE_ARCHS:
            raise BitstreamError(f"unknown architecture code {self.arch_code}")
        if len(self.bounds) != self.L:
            raise BitstreamError("one alphabet per grid required")
        for lo, hi in self.bounds:
            if not LATENT_MIN <= lo <= hi <= LATENT_MAX or hi - lo + 1 > rc.MAX_ALPHABET:
                raise BitstreamError(f"bad latent alphabet [{lo}, {hi}]")
        if not self.no_params:
            for e in self.step_exps:
                if not STEP_EXP_MIN <= e <= STEP_EXP_MAX:
                    raise BitstreamError(f"quantization step exponent {e} out of range")
            for scale, maxabs in self.param_models:
                if not 1 <= scale <= SCALE_Q4_MAX or maxabs > PARAM_INT_MAX:
                    raise BitstreamError(f"bad parameter model ({scale}, {maxabs})")


@dataclass
class Bitstream:
    header: Header
    params: Optional[bytes]
    latents: bytes = b""

    def to_bytes(self) -> bytes:
        h = self.header
        h.validate()
        if h.no_params != (self.params is None):
            raise BitstreamError("parameter section must be present exactly when the mode requires it")
        flags = FLAG_NO_PARAMS if h.no_params else 0
        parts = [_FIXED.pack(MAGIC, VERSION, flags, h.H, h.W, h.L, h.arch_code)]
        if not h.no_params:
            parts.append(_STEPS.pack(*h.step_exps))
            parts.extend(_MODEL.pack(*m) for m in h.param_models)
        parts.extend(_BOUND.pack(*b) for b in h.bounds)
        if not h.no_params:
            parts.append(_U32.pack(len(self.params)))
        parts.append(_U32.pack(len(self.latents)))
        if not h.no_params:
            parts.append(self.params)
        parts.append(self.latents)
        return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"bitstream truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct) -> tuple:
        return st.unpack(self.take(st.size))


def parse(data: bytes) -> Bitstream:
    data = bytes(data)
    rd = _Reader(data)
    magic, version, flags, H, W, L, code = rd.unpack(_FIXED)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    if flags & ~FLAG_NO_PARAMS:
        raise BitstreamError(f"unknown flags 0x{flags:02x}")
    if not 1 <= L <= MAX_LEVELS:
        raise BitstreamError(f"bad level count {L}")
    no_params = bool(flags & FLAG_NO_PARAMS)
    steps, models = (DEFAULT_STEP_EXP,) * 3, ((1, 0),) * 3
    if not no_params:
        steps = rd.unpack(_STEPS)
        models = tuple(rd.unpack(_MODEL) for _ in range(3))
    bounds = [rd.unpack(_BOUND) for _ in range(L)]
    header = Header(H, W, L, code, bounds, no_params, tuple(steps), models)
    header.validate()
    plen = None if no_params else rd.unpack(_U32)[0]
    llen = rd.unpack(_U32)[0]
    params = None if plen is None else rd.take(plen)
    latents = rd.take(llen)
    if rd.pos != len(data):
        raise BitstreamError(f"{len(data) - rd.pos} trailing bytes after the last section")
    return Bitstream(header, params, latents)


# parameter quantization -------------------------------------------------------------

def param_layout(arch) -> list[tuple[str, str, tuple]]:
    """(module, name, shape) in coding order: ARM, upsampling, synthesis."""
    arch = get_arch(arch)
    out = []
    for i, spec in enumerate(arch.arm):
        out += [("arm", f"arm.{i}.w", spec.weight_shape()), ("arm", f"arm.{i}.b", (spec.out_feat,))]
    out.append(("ups", "ups.0.w", (arch.ups_kernel,) * 2))
    for i, spec in enumerate(arch.synth):
        out += [("synth", f"synth.{i}.w", spec.weight_shape()), ("synth", f"synth.{i}.b", (spec.out_feat,))]
    return out


def laplace_model(ints: np.ndarray) -> tuple[int, int]:
    """(scale in 1/16 units, max |value|) of a zero-mean Laplace fitted to ``ints``."""
    ints = np.asarray(ints, dtype=np.int64)
    if ints.size == 0:
        return 1, 0
    scale = int(round(float(np.abs(ints).mean()) * 16))
    return min(max(scale, 1), SCALE_Q4_MAX), int(np.abs(ints).max())


def inv_scale_from_model(scale_q4: int) -> int:
    return (1 << 24) // scale_q4


@dataclass
class QuantizedParams:
    arch: DecoderArch
    step_exps: tuple
    ints: dict

    def module_ints(self, module: str) -> np.ndarray:
        parts = [self.ints[name].ravel() for m, name, _ in param_layout(self.arch) if m == module]
        return np.concatenate(parts).astype(np.int64)

    def models(self) -> tuple:
        return tuple(laplace_model(self.module_ints(m)) for m in MODULES)

    def dequantize(self) -> DecoderParams:
        mods = {m: Parameters() for m in MODULES}
        exps = dict(zip(MODULES, self.step_exps))
        for m, name, shape in param_layout(self.arch):
            vals = self.ints[name].astype(np.float64) * 2.0 ** exps[m]
            mods[m][name] = Tensor(vals.reshape(shape).astype(DTYPE), requires_grad=True)
        return DecoderParams(mods["arm"], mods["ups"], mods["synth"], self.arch)


def quantize_module(params: Parameters, names: Sequence[str], step_exp: int) -> dict:
    step = 2.0 ** step_exp
    return {n: np.clip(np.rint(params[n].data.astype(np.float64) / step), -PARAM_INT_MAX, PARAM_INT_MAX
                       ).astype(np.int32) for n in names}


def quantize_params(params: DecoderParams, step_exps: Sequence[int] = (DEFAULT_STEP_EXP,) * 3
                    ) -> QuantizedParams:
    """Uniform quantization of each module with step 2^e.

    A module whose integers all come out zero is stored with the default step.
    """
    exps = []
    ints = {}
    layout = param_layout(params.arch)
    for m, e in zip(MODULES, step_exps):
        if not STEP_EXP_MIN <= e <= STEP_EXP_MAX:
            raise ValueError(f"step exponent {e} outside [{STEP_EXP_MIN}, {STEP_EXP_MAX}]")
        names = [n for mm, n, _ in layout if mm == m]
        q = quantize_module(params.module(m), names, e)
        if not any(v.any() for v in q.values()):
            e = DEFAULT_STEP_EXP
        exps.append(int(e))
        ints.update(q)
    return QuantizedParams(params.arch, tuple(exps), ints)


def _segments(qp: QuantizedParams, models):
    values = np.concatenate([qp.module_ints(m) for m in MODULES])
    ends = np.cumsum([qp.module_ints(m).size for m in MODULES]).astype(np.int64)
    amins = np.array([-mx for _, mx in models], dtype=np.int64)
    amaxs = np.array([mx for _, mx in models], dtype=np.int64)
    invbs = np.array([inv_scale_from_model(s) for s, _ in models], dtype=np.int64)
    return values, ends, amins, amaxs, invbs


def encode_params(qp: QuantizedParams) -> bytes:
    models = qp.models()
    values, ends, amins, amaxs, invbs = _segments(qp, models)
    out = rc.buffer_for(values.size)
    n = rc.encode_laplace_segments(values, ends, amins, amaxs, invbs, out)
    if n < 0:
        raise rc.RangeCoderError("parameter outside its alphabet")
    return out[:n].tobytes()


def param_bits(qp: QuantizedParams) -> float:
    """Ideal cost of the parameter section under its coding model."""
    return float(rc.laplace_segments_bits(*_segments(qp, qp.models())))


def decode_params(stream: Bitstream) -> QuantizedParams:
    h = stream.header
    if h.no_params or stream.params is None:
        raise BitstreamError("stream has no parameter section")
    arch = h.arch
    layout = param_layout(arch)
    sizes = {m: sum(int(np.prod(s)) for mm, _, s in layout if mm == m) for m in MODULES}
    ends = np.cumsum([sizes[m] for m in MODULES]).astype(np.int64)
    amins = np.array([-mx for _, mx in h.param_models], dtype=np.int64)
    amaxs = np.array([mx for _, mx in h.param_models], dtype=np.int64)
    invbs = np.array([inv_scale_from_model(s) for s, _ in h.param_models], dtype=np.int64)
    values, status = rc.decode_laplace_segments(np.frombuffer(stream.params, dtype=np.uint8),
                                                ends, amins, amaxs, invbs)
    rc.raise_for_status(status)
    ints, pos = {}, 0
    for _, name, shape in layout:
        n = int(np.prod(shape))
        ints[name] = values[pos:pos + n].reshape(shape).astype(np.int32)
        pos += n
    return QuantizedParams(arch, tuple(h.step_exps), ints)


# assembly -------------------------------------------------------------------------------

def build(H: int, W: int, grids: Sequence[np.ndarray], arch, qparams: Optional[QuantizedParams] = None,
          shared: Optional[DecoderParams] = None) -> bytes:
    """Serialize an image: quantized parameters (overfitted mode) or a reference
    to shared parameters (``shared``, non-overfitted mode) plus coded grids."""
    arch = get_arch(arch)
    if (qparams is None) == (shared is None):
        raise ValueError("exactly one of qparams / shared is required")
    for l, g in enumerate(grids):
        if g.shape != grid_shape(H, W, l):
            raise ValueError(f"grid {l} has shape {g.shape}, expected {grid_shape(H, W, l)}")
    dec = qparams.dequantize() if qparams is not None else shared
    if dec.arch.id != arch.id:
        raise ValueError("parameter architecture mismatch")
    farm = FixedArm.from_float(dec.psi, arch.arm)
    latents, bounds = encode_pyramid(grids, farm)
    if qparams is not None:
        header = Header(H, W, len(grids), ARCH_CODES[arch.id], bounds, False, qparams.step_exps,
                        qparams.models())
        return Bitstream(header, encode_params(qparams), latents).to_bytes()
    header = Header(H, W, len(grids), ARCH_CODES[arch.id], bounds, True)
    return Bitstream(header, None, latents).to_bytes()
