"""Per-image overfitting encoder.

Latents and all decoder networks are fitted to one image by minimising
MSE + lambda * rate / pixels, then the networks are quantized, everything is
entropy coded and the stream is checked by decoding it.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import bitstream as bs
from .arm import ContextTemplate, pyramid_rate, rate_bits
from .decoder import (MODULES, ComplexityReport, DecoderParams, FixedDecoder, decode_image, get_arch,
                      mac_per_pixel, synthesis_net, upsample)
from .latent import QuantMode, SaturationFlag, hard_round, init_pyramid, quantize
from .metrics import as_rgb, psnr
from .tensor import DTYPE, Adam, NonFiniteError, Parameters, Tensor, mean_all, square, sub

log = logging.getLogger(__name__)

PRESETS = {"P600": 598, "P1100": 1096, "P1600": 1594, "P3600": 3588, "P10600": 10565, "P102600": 102607}
MIN_SIZE = 8


class EncodeError(RuntimeError):
    pass


def kappa_enc(n_iters: int, kappa_dec: float) -> float:
    """Encoder MAC/pixel: one forward and one (twice as costly) backward pass per iteration."""
    if n_iters < 0 or kappa_dec < 0:
        raise ValueError("n_iters and kappa_dec must be non-negative")
    return 3 * n_iters * kappa_dec


@dataclass
class EncoderConfig:
    lam: float = 1e-3
    arch: int = 300
    preset: Optional[str] = "P1600"
    n_iters: Optional[int] = None
    L: int = 7
    lr_start: float = 1e-2
    lr_floor: float = 1e-6
    patience: Optional[int] = None
    seed: int = 0
    phases: tuple = (0.70, 0.25, 0.05)
    soft_temps: tuple = (0.3, 0.1)
    step_search: bool = True
    log_every: int = 100

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        get_arch(self.arch)
        if self.n_iters is None and self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {list(PRESETS)}")
        if self.iterations() <= 0:
            raise ValueError("n_iters must be positive")
        if len(self.phases) != 3 or abs(sum(self.phases) - 1.0) > 1e-9 or min(self.phases) < 0:
            raise ValueError("phase fractions must be three non-negative numbers summing to 1")

    def iterations(self) -> int:
        return int(self.n_iters) if self.n_iters is not None else PRESETS[self.preset]

    def phase_lengths(self) -> tuple[int, int, int]:
        n = self.iterations()
        noise = int(round(self.phases[0] * n))
        soft = min(int(round(self.phases[1] * n)), n - noise)
        return noise, soft, n - noise - soft

    def patience_iters(self) -> int:
        return self.patience if self.patience is not None else max(10, self.iterations() // 25)


@dataclass
class RdCost:
    distortion: float
    rate_bits: float
    lam: float
    n_pixels: int

    @property
    def total(self) -> float:
        return self.distortion + self.lam * self.rate_bits / self.n_pixels


@dataclass
class TrainState:
    params: DecoderParams
    latents: list
    target: Tensor
    lam: float
    rng: np.random.Generator
    opt: Adam
    tmpl: ContextTemplate
    H: int
    W: int
    it: int = 0

    @classmethod
    def create(cls, image: np.ndarray, lam: float, arch, L: int = 7, seed: int = 0,
               lr: float = 1e-2) -> "TrainState":
        img = as_rgb(image)
        H, W = img.shape[:2]
        if H < MIN_SIZE or W < MIN_SIZE:
            raise ValueError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {H}x{W}")
        arch = get_arch(arch)
        params = DecoderParams.init(arch, seed)
        pyr = init_pyramid(H, W, L)
        latents = [Tensor(s, requires_grad=True) for s in pyr.shadow]
        target = Tensor((img.astype(DTYPE) / 255.0).transpose(2, 0, 1)[None])
        everything = Parameters([*params.all().items(), *((f"lat.{l}", t) for l, t in enumerate(latents))])
        return cls(params, latents, target, lam, np.random.default_rng(seed), Adam(everything, lr),
                   ContextTemplate(arch.context_size), H, W)

    @property
    def arch(self):
        return self.params.arch


def forward_loss(state: TrainState, mode: QuantMode, rng: Optional[np.random.Generator] = None):
    """(RdCost, differentiable loss) for the current latents and parameters."""
    rng = rng if rng is not None else state.rng
    proxies = [quantize(y, mode, rng) for y in state.latents]
    dense = upsample(proxies, state.params.upsilon, state.arch, state.H, state.W)
    xhat = synthesis_net(dense, state.params.theta, state.arch)
    dist = mean_all(square(sub(xhat, state.target)))
    rate = pyramid_rate(proxies, state.params.psi, state.arch.arm, state.tmpl)
    loss = dist + rate * (state.lam / (state.H * state.W))
    cost = RdCost(float(dist.data), float(rate.data), state.lam, state.H * state.W)
    return cost, loss


def training_step(state: TrainState, mode: QuantMode) -> RdCost:
    """One forward/backward pass and Adam update of latents and all networks."""
    state.opt.zero_grad()
    cost, loss = forward_loss(state, mode)
    if not math.isfinite(cost.total):
        raise NonFiniteError(f"loss diverged at iteration {state.it}")
    loss.backward()
    state.opt.step()
    state.it += 1
    return cost


class _Patience:
    """Halve the learning rate when the smoothed loss stops improving."""

    def __init__(self, opt: Adam, patience: int, floor: float, beta: float = 0.9):
        self.opt, self.patience, self.floor, self.beta = opt, patience, floor, beta
        self.reset()

    def reset(self):
        self.ema = None
        self.best = math.inf
        self.wait = 0

    def update(self, loss: float):
        self.ema = loss if self.ema is None else self.beta * self.ema + (1 - self.beta) * loss
        if self.ema < self.best:
            self.best, self.wait = self.ema, 0
            return
        self.wait += 1
        if self.wait >= self.patience and self.opt.lr > self.floor:
            self.opt.lr = max(self.opt.lr * 0.5, self.floor)
            self.wait = 0


def fit(image: np.ndarray, cfg: EncoderConfig, lr: Optional[float] = None) -> tuple[TrainState, list]:
    """Run the three-phase schedule; returns the final state and per-iteration losses."""
    state = TrainState.create(image, cfg.lam, cfg.arch, cfg.L, cfg.seed, lr or cfg.lr_start)
    sched = _Patience(state.opt, cfg.patience_iters(), cfg.lr_floor)
    n_noise, n_soft, n_hard = cfg.phase_lengths()
    t_hi, t_lo = cfg.soft_temps
    history = []
    plan = [(QuantMode("Noise"), n_noise), (None, n_soft), (QuantMode("HardRound"), n_hard)]
    for mode, count in plan:
        sched.reset()
        for k in range(count):
            if mode is None:
                frac = k / max(count - 1, 1)
                m = QuantMode("SoftRound", t_hi + (t_lo - t_hi) * frac)
            else:
                m = mode
            cost = training_step(state, m)
            history.append(cost.total)
            sched.update(cost.total)
            if cfg.log_every and state.it % cfg.log_every == 0:
                log.info("iter %d/%d %s loss %.6f mse %.6f rate %.0f bits lr %.2e", state.it,
                         cfg.iterations(), m.kind, cost.total, cost.distortion, cost.rate_bits, state.opt.lr)
    return state, history


@dataclass
class EncodeResult:
    bitstream: bytes
    recon: np.ndarray
    bpp: float
    psnr_db: float
    cost: RdCost
    report: ComplexityReport
    qparams: bs.QuantizedParams
    grids: list
    loss_history: list = field(default_factory=list)
    restarted: bool = False
    saturated: int = 0


def _evaluate(params: DecoderParams, grids, exps, img01, lam, bits_cache: dict):
    qp = bs.quantize_params(params, exps)
    fdec = FixedDecoder.from_params(qp.dequantize())
    H, W = img01.shape[:2]
    recon = fdec.reconstruct(grids, H, W)
    key = qp.step_exps[0]
    if key not in bits_cache:
        bits_cache[key] = rate_bits(grids, fdec.arm, exact=True)
    rate = bits_cache[key] + bs.param_bits(qp)
    cost = RdCost(float(np.mean((recon / 255.0 - img01) ** 2)), rate, lam, H * W)
    return cost, qp, recon


def search_steps(params: DecoderParams, grids, img: np.ndarray, lam: float, search: bool = True):
    """Greedy per-module choice of the weight quantization step 2^e, e in [-12, -4]."""
    img01 = img.astype(np.float64) / 255.0
    cache: dict = {}
    exps = [bs.DEFAULT_STEP_EXP] * 3
    best = _evaluate(params, grids, exps, img01, lam, cache)
    if not search:
        return best
    for m in range(len(MODULES)):
        for e in range(bs.STEP_EXP_MAX, bs.STEP_EXP_MIN - 1, -1):
            if e == exps[m]:
                continue
            trial = list(exps)
            trial[m] = e
            cand = _evaluate(params, grids, trial, img01, lam, cache)
            if cand[0].total < best[0].total:
                best, exps = cand, trial
    return best


def encode_image(image: np.ndarray, cfg: Optional[EncoderConfig] = None) -> EncodeResult:
    cfg = cfg or EncoderConfig()
    img = as_rgb(image)
    H, W = img.shape[:2]
    t0 = time.perf_counter()
    restarted = False
    try:
        state, history = fit(img, cfg)
    except NonFiniteError as exc:
        log.warning("training diverged (%s); restarting with lr %.1e", exc, cfg.lr_start / 10)
        restarted = True
        try:
            state, history = fit(img, cfg, lr=cfg.lr_start / 10)
        except NonFiniteError as exc2:
            raise EncodeError(f"training diverged twice: {exc2}") from exc2

    flag = SaturationFlag()
    grids = [hard_round(y.data, flag) for y in state.latents]
    cost, qp, recon = search_steps(state.params, grids, img, cfg.lam, cfg.step_search)
    data = bs.build(H, W, grids, state.arch, qparams=qp)
    encode_s = time.perf_counter() - t0

    decoded, report = decode_image(data)
    if not np.array_equal(decoded, recon):
        raise EncodeError("decoded image differs from the encoder reconstruction")
    n = cfg.iterations()
    report.n_iters = n
    report.kappa_enc = kappa_enc(n, report.kappa_dec)
    report.timings = {"encode_s": encode_s, **{f"decode_{k}": v for k, v in report.timings.items()}}
    return EncodeResult(data, recon, 8.0 * len(data) / (H * W), psnr(img, recon), cost, report, qp, grids,
                        history, restarted, flag.count)


# sweeps ---------------------------------------------------------------------------

def _sweep_job(args):
    name, image, cfg = args
    t0 = time.perf_counter()
    try:
        res = encode_image(image, cfg)
    except Exception as exc:  # recorded, the sweep goes on
        return name, cfg, None, f"{type(exc).__name__}: {exc}"
    encode_s = time.perf_counter() - t0
    t1 = time.perf_counter()
    decode_image(res.bitstream)
    decode_ms = (time.perf_counter() - t1) * 1e3
    row = {"image": name, "lambda": cfg.lam, "arch": get_arch(cfg.arch).id, "n_iters": cfg.iterations(),
           "kappa_enc": res.report.kappa_enc, "bpp": res.bpp, "psnr_db": res.psnr_db,
           "encode_s": round(encode_s, 3), "decode_ms": round(decode_ms, 3)}
    return name, cfg, row, None


def sweep(images: dict, lambdas: Sequence[float], base: Optional[EncoderConfig] = None,
          workers: int = 1, csv_path=None):
    """Encode every (image, lambda) pair. Returns (rows, failures).

    ``images`` maps a name to an 8-bit image. Failures are collected as
    (name, lambda, message) and do not stop the sweep.
    """
    from .metrics import write_csv

    base = base or EncoderConfig()
    jobs = [(name, img, replace(base, lam=float(lam))) for name, img in images.items() for lam in lambdas]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, os.cpu_count() or 1)) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    rows = [r for _, _, r, _ in results if r is not None]
    failures = [(name, cfg.lam, err) for name, cfg, r, err in results if r is None]
    for name, lam, err in failures:
        log.error("encode of %s at lambda %g failed: %s", name, lam, err)
    if csv_path is not None:
        write_csv(csv_path, rows)
    return rows, failures
