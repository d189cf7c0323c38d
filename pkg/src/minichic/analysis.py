"""Feed-forward analysis transform for the non-overfitted (N-O) mode.

A stack of residual depthwise-separable blocks maps an image to the latent
pyramid in one pass; a decoder shared by all images replaces the per-image
decoder parameters, so N-O streams carry latents only.
"""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bitstream as bs
from . import kernels
from .arm import ContextTemplate, pyramid_rate
from .decoder import DecoderParams, get_arch, synthesis_net, upsample
from .latent import LatentPyramid, QuantMode, hard_round, max_levels, quantize
from .metrics import as_rgb
from .tensor import (DTYPE, Adam, NonFiniteError, Parameters, Tensor, add, avgpool2, conv2d,
                     depthwise_conv2d, mean_all, pad_edge, relu, reshape, square, sub)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AnalysisSpec:
    L: int = 7
    C: int = 64
    blocks_per_level: int = 2
    expand: int = 4
    kernel: int = 7

    def __post_init__(self):
        if self.L < 1 or self.C < 1 or self.blocks_per_level < 0 or self.expand < 1:
            raise ValueError(f"invalid analysis spec {self}")
        if self.kernel % 2 == 0:
            raise ValueError("depthwise kernel must be odd")


def _blocks(spec: AnalysisSpec, L: int):
    """(level, index, in_ch, downsample) for every residual block."""
    out = []
    for lvl in range(L):
        cin = 3 if lvl == 0 else spec.C
        out.append((lvl, 0, cin, lvl > 0))
        for j in range(spec.blocks_per_level):
            out.append((lvl, j + 1, spec.C, False))
    return out


def _init_conv(params: Parameters, name: str, shape: tuple, fan_in: int, rng) -> None:
    a = 1.0 / math.sqrt(fan_in)
    params[f"{name}.w"] = Tensor(rng.uniform(-a, a, shape), requires_grad=True)
    params[f"{name}.b"] = Tensor(rng.uniform(-a, a, shape[0]), requires_grad=True)


def init_analysis(spec: AnalysisSpec = AnalysisSpec(), seed: int = 0) -> Parameters:
    rng = np.random.default_rng(seed)
    C, E, k = spec.C, spec.C * spec.expand, spec.kernel
    alpha = Parameters()
    for lvl, j, cin, down in _blocks(spec, spec.L):
        p = f"ana.{lvl}.{j}"
        _init_conv(alpha, f"{p}.dw", (cin, k, k), k * k, rng)
        _init_conv(alpha, f"{p}.pw1", (E, cin, 1, 1), cin, rng)
        _init_conv(alpha, f"{p}.pw2", (C, E, 1, 1), E, rng)
        if down or cin != C:
            _init_conv(alpha, f"{p}.skip", (C, cin, 1, 1), cin, rng)
    for lvl in range(spec.L):
        _init_conv(alpha, f"ana.{lvl}.merge", (1, C, 1, 1), C, rng)
    return alpha


def _block(x: Tensor, alpha: Parameters, p: str, down: bool) -> Tensor:
    h = depthwise_conv2d(x, alpha[f"{p}.dw.w"], alpha[f"{p}.dw.b"], stride=2 if down else 1)
    h = relu(conv2d(h, alpha[f"{p}.pw1.w"], alpha[f"{p}.pw1.b"]))
    h = conv2d(h, alpha[f"{p}.pw2.w"], alpha[f"{p}.pw2.b"])
    skip = avgpool2(x) if down else x
    if f"{p}.skip.w" in alpha:
        skip = conv2d(skip, alpha[f"{p}.skip.w"], alpha[f"{p}.skip.b"])
    return add(h, skip)


def analysis_forward(x: Tensor, alpha: Parameters, spec: AnalysisSpec, L: Optional[int] = None) -> list:
    """(1, 3, H, W) image in [0, 1] -> list of L continuous (h_l, w_l) grids."""
    L = spec.L if L is None else L
    grids = []
    feats = x
    blocks = _blocks(spec, L)
    for lvl in range(L):
        for _, j, _, down in (b for b in blocks if b[0] == lvl):
            feats = _block(feats, alpha, f"ana.{lvl}.{j}", down)
        g = conv2d(feats, alpha[f"ana.{lvl}.merge.w"], alpha[f"ana.{lvl}.merge.b"])
        grids.append(reshape(g, g.shape[2:]))
    return grids


# inference path: same arithmetic without the autodiff tape, with the
# expand/contract pair run over pixel chunks that stay in cache
_CHUNK = 2048


def _block_inference(x: np.ndarray, alpha: Parameters, p: str, down: bool) -> np.ndarray:
    c, h, w = x.shape
    dw = alpha[f"{p}.dw.w"].data
    k = dw.shape[-1]
    stride = 2 if down else 1
    ho, wo = -(-h // stride), -(-w // stride)
    xp = np.ascontiguousarray(pad_edge(x[None], k // 2, k // 2, k // 2, k // 2))
    hdw = kernels.dwconv_forward(xp, dw, stride, ho, wo)[0]
    hdw += alpha[f"{p}.dw.b"].data[:, None, None]
    if down:
        skip = pad_edge(x[None], 0, h % 2, 0, w % 2)[0].reshape(c, ho, 2, wo, 2).mean(axis=(2, 4))
    else:
        skip = x
    skip = skip.reshape(c, -1)
    if f"{p}.skip.w" in alpha:
        skip = alpha[f"{p}.skip.w"].data[:, :, 0, 0] @ skip + alpha[f"{p}.skip.b"].data[:, None]
    w1, b1 = alpha[f"{p}.pw1.w"].data[:, :, 0, 0], alpha[f"{p}.pw1.b"].data[:, None]
    w2, b2 = alpha[f"{p}.pw2.w"].data[:, :, 0, 0], alpha[f"{p}.pw2.b"].data[:, None]
    flat = hdw.reshape(hdw.shape[0], -1)
    out = np.empty((w2.shape[0], flat.shape[1]), dtype=flat.dtype)
    for s0 in range(0, flat.shape[1], _CHUNK):
        sl = slice(s0, s0 + _CHUNK)
        t = w1 @ flat[:, sl]
        t += b1
        np.maximum(t, 0, out=t)
        o = out[:, sl]
        np.matmul(w2, t, out=o)
        o += b2
        o += skip[:, sl]
    return out.reshape(-1, ho, wo)


def analysis_inference(image01: np.ndarray, alpha: Parameters, spec: AnalysisSpec, L: int) -> list:
    """(3, H, W) image in [0, 1] -> L continuous grids, no gradient bookkeeping."""
    feats = image01
    grids = []
    blocks = _blocks(spec, L)
    for lvl in range(L):
        for _, j, _, down in (b for b in blocks if b[0] == lvl):
            feats = _block_inference(feats, alpha, f"ana.{lvl}.{j}", down)
        mw, mb = alpha[f"ana.{lvl}.merge.w"].data[:, :, 0, 0], alpha[f"ana.{lvl}.merge.b"].data
        g = (mw @ feats.reshape(feats.shape[0], -1))[0] + mb[0]
        grids.append(g.reshape(feats.shape[1:]))
    return grids


def _levels(spec: AnalysisSpec, H: int, W: int) -> int:
    L = min(spec.L, max_levels(H, W))
    if L != spec.L:
        log.warning("clamping analysis levels from %d to %d for a %dx%d image", spec.L, L, H, W)
    return L


def _to_input(image: np.ndarray) -> Tensor:
    img = as_rgb(image)
    return Tensor((img.astype(DTYPE) / 255.0).transpose(2, 0, 1)[None])


def analyze(image: np.ndarray, alpha: Parameters, spec: AnalysisSpec = AnalysisSpec()) -> LatentPyramid:
    """One forward pass: continuous shadow plus hard-rounded integer grids."""
    img = as_rgb(image)
    H, W = img.shape[:2]
    L = _levels(spec, H, W)
    shadow = analysis_inference(_to_input(img).data[0], alpha, spec, L)
    return LatentPyramid(H, W, L, [hard_round(s) for s in shadow], shadow, spec.L)


def analysis_mac_per_pixel(spec: AnalysisSpec = AnalysisSpec(), H: Optional[int] = None,
                           W: Optional[int] = None) -> float:
    """Forward MACs per input pixel, biases free.

    Level l runs at 4^-l of the input resolution (or the exact ceil sizes
    when H and W are given).
    """
    C, E, k = spec.C, spec.C * spec.expand, spec.kernel

    def frac(lvl):
        if H is None or W is None:
            return 4.0 ** -lvl
        return -(-H // (1 << lvl)) * -(-W // (1 << lvl)) / float(H * W)

    total = 0.0
    for lvl, _, cin, down in _blocks(spec, spec.L):
        macs = cin * k * k + cin * E + E * C
        if down or cin != C:
            macs += cin * C
        total += macs * frac(lvl)
    total += sum(C * frac(lvl) for lvl in range(spec.L))
    return total


# joint training ---------------------------------------------------------------

@dataclass
class NoTrainResult:
    alpha: Parameters
    decoder: DecoderParams
    lam: float
    spec: AnalysisSpec
    history: list = field(default_factory=list)  # (step, mean eval loss)
    steps: int = 0
    final_lr: float = 0.0


def _patch_loss(patch: Tensor, alpha: Parameters, dec: DecoderParams, spec: AnalysisSpec, lam: float,
                rng: np.random.Generator, tmpl: ContextTemplate):
    H, W = patch.shape[2:]
    L = min(spec.L, max_levels(H, W), dec.arch.synth_in)
    grids = analysis_forward(patch, alpha, spec, L)
    proxies = [quantize(g, QuantMode("Noise"), rng) for g in grids]
    xhat = synthesis_net(upsample(proxies, dec.upsilon, dec.arch, H, W), dec.theta, dec.arch)
    dist = mean_all(square(sub(xhat, patch)))
    rate = pyramid_rate(proxies, dec.psi, dec.arch.arm, tmpl)
    return dist + rate * (lam / (H * W))


def evaluate_no(patches: Sequence[np.ndarray], alpha, dec, spec, lam, seed: int = 1234) -> float:
    """Mean D + lambda R over ``patches`` with frozen noise."""
    rng = np.random.default_rng(seed)
    tmpl = ContextTemplate(dec.arch.context_size)
    vals = [float(_patch_loss(_to_input(p), alpha, dec, spec, lam, rng, tmpl).data) for p in patches]
    return float(np.mean(vals))


def random_patches(images: Sequence[np.ndarray], count: int, size: int = 256, seed: int = 0) -> list:
    """``count`` random size x size crops, cycling through ``images``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        img = as_rgb(images[i % len(images)])
        h, w = img.shape[:2]
        ph, pw = min(size, h), min(size, w)
        y = int(rng.integers(0, h - ph + 1))
        x = int(rng.integers(0, w - pw + 1))
        out.append(img[y:y + ph, x:x + pw].copy())
    return out


def train_no(patches: Sequence[np.ndarray], lam: float, spec: AnalysisSpec = AnalysisSpec(),
             arch=2300, max_steps: int = 100000, lr: float = 1e-3, lr_floor: float = 1e-6,
             patience: int = 200, batch: int = 1, eval_every: int = 50, seed: int = 0) -> NoTrainResult:
    """Jointly fit the analysis transform and a shared decoder on ``patches``.

    Adam with patience-based halving; stops when the learning rate reaches
    ``lr_floor`` or after ``max_steps``. A divergent step restores the last
    evaluated state and halves the learning rate.
    """
    if not patches:
        raise ValueError("at least one training patch is required")
    rng = np.random.default_rng(seed)
    alpha = init_analysis(spec, seed)
    dec = DecoderParams.init(arch, seed)
    tmpl = ContextTemplate(dec.arch.context_size)
    inputs = [_to_input(p) for p in patches]
    everything = Parameters([*alpha.items(), *dec.all().items()])
    opt = Adam(everything, lr)
    history = []
    ema, best, wait = None, math.inf, 0
    snapshot = {n: t.data.copy() for n, t in everything.items()}
    step = 0
    while step < max_steps and opt.lr > lr_floor:
        if eval_every and step % eval_every == 0:
            history.append((step, evaluate_no(patches, alpha, dec, spec, lam)))
            snapshot = {n: t.data.copy() for n, t in everything.items()}
        opt.zero_grad()
        total = 0.0
        try:
            for _ in range(batch):
                loss = _patch_loss(inputs[int(rng.integers(len(inputs)))], alpha, dec, spec, lam, rng, tmpl)
                loss = loss * (1.0 / batch)
                total += float(loss.data)
                loss.backward()
            opt.step()
        except NonFiniteError:
            log.warning("N-O training diverged at step %d; restoring and halving lr", step)
            for n, t in everything.items():
                t.data = snapshot[n].copy()
            opt.lr *= 0.5
            continue
        step += 1
        ema = total if ema is None else 0.95 * ema + 0.05 * total
        if ema < best:
            best, wait = ema, 0
        else:
            wait += 1
            if wait >= patience:
                opt.lr *= 0.5
                wait = 0
                log.info("step %d: lr -> %.2e", step, opt.lr)
    history.append((step, evaluate_no(patches, alpha, dec, spec, lam)))
    return NoTrainResult(alpha, dec, lam, spec, history, step, opt.lr)


# checkpoints and N-O encoding --------------------------------------------------------

def save_checkpoint(path, result: NoTrainResult) -> None:
    """Versioned archive holding the analysis weights, shared decoder and lambda."""
    meta = {"format_version": CHECKPOINT_VERSION, "lambda": result.lam, "arch": result.decoder.arch.id,
            "spec": asdict(result.spec), "steps": result.steps}
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    arrays.update({f"alpha/{n}": t.data for n, t in result.alpha.items()})
    arrays.update({f"decoder/{n}": t.data for n, t in result.decoder.all().items()})
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> NoTrainResult:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            arrays = {k: z[k] for k in z.files if k != "meta"}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    spec = AnalysisSpec(**meta["spec"])
    alpha = Parameters((k[len("alpha/"):], Tensor(v, requires_grad=True))
                       for k, v in arrays.items() if k.startswith("alpha/"))
    ref = DecoderParams.init(meta["arch"])
    dec_arrays = {k[len("decoder/"):]: v for k, v in arrays.items() if k.startswith("decoder/")}
    for module in (ref.psi, ref.upsilon, ref.theta):
        for n in module.names():
            if n not in dec_arrays:
                raise CheckpointError(f"{path}: decoder parameter {n} missing")
            module[n] = Tensor(dec_arrays[n], requires_grad=True)
    ref.check()
    return NoTrainResult(alpha, ref, float(meta["lambda"]), spec, steps=int(meta.get("steps", 0)))


def no_encode(image: np.ndarray, ckpt: NoTrainResult) -> bytes:
    """N-O bitstream: header flag set, no parameter section."""
    pyr = analyze(image, ckpt.alpha, ckpt.spec)
    grids = pyr.grids[:ckpt.decoder.arch.synth_in]
    return bs.build(pyr.H, pyr.W, grids, ckpt.decoder.arch, shared=ckpt.decoder)
