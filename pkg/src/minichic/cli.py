"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable input,
corrupt bitstream, failed encode).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import bitstream as bs
from ._jit import backend_name
from .analysis import (AnalysisSpec, CheckpointError, load_checkpoint, no_encode, random_patches,
                       save_checkpoint, train_no)
from .decoder import ARCHS, DecodeError, DecoderParams, decode_image, get_arch, mac_per_pixel
from .encoder import PRESETS, EncodeError, EncoderConfig, encode_image, sweep
from .imageio import ImageFormatError, load_image, save_image
from .latent import grid_shape
from .rangecoder import RangeCoderError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
DATA_ERRORS = (DecodeError, bs.BitstreamError, RangeCoderError, ImageFormatError, CheckpointError,
               EncodeError, OSError)

log = logging.getLogger("minichic")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(dest, payload: dict) -> None:
    text = json.dumps(payload, indent=2)
    if dest in (None, "-"):
        print(text)
    else:
        Path(dest).write_text(text + "\n")


def _config(args, lam: float) -> EncoderConfig:
    try:
        return EncoderConfig(lam=lam, arch=args.arch, preset=args.preset, n_iters=args.iters,
                             seed=args.seed, L=args.levels)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_encode(args) -> int:
    img = load_image(args.image)
    res = encode_image(img, _config(args, args.lam))
    out = Path(args.out or Path(args.image).with_suffix(".mch"))
    out.write_bytes(res.bitstream)
    summary = {"out": str(out), "bytes": len(res.bitstream), "bpp": res.bpp, "psnr_db": res.psnr_db,
               "arch": get_arch(args.arch).id, "lambda": args.lam, "n_iters": res.report.n_iters,
               "kappa_dec": res.report.kappa_dec, "kappa_enc": res.report.kappa_enc,
               "encode_s": res.report.timings["encode_s"]}
    print(json.dumps(summary))
    if args.json_timings:
        _write_json(args.json_timings, res.report.timings)
    return EXIT_OK


def cmd_decode(args) -> int:
    data = Path(args.stream).read_bytes()
    shared = load_checkpoint(args.checkpoint).decoder if args.checkpoint else None
    img, report = decode_image(data, shared=shared)
    out = args.out or str(Path(args.stream).with_suffix(".png"))
    save_image(out, img)
    timings = {k: report.timings[k] for k in ("arm", "upsample", "synthesis", "total")}
    if args.json_timings:
        _write_json(args.json_timings, timings)
    else:
        print(json.dumps(timings))
    return EXIT_OK


def cmd_sweep(args) -> int:
    images = {Path(p).stem: load_image(p) for p in args.images}
    base = _config(args, args.lam[0])
    rows, failures = sweep(images, args.lam, base, workers=args.workers, csv_path=args.csv)
    if not args.csv:
        for r in rows:
            print(json.dumps(r))
    for name, lam, err in failures:
        print(f"failed: {name} lambda={lam}: {err}", file=sys.stderr)
    return EXIT_DATA if failures else EXIT_OK


def _synthetic_stream(arch, H: int, W: int, seed: int) -> bytes:
    rng = np.random.default_rng(seed)
    params = DecoderParams.init(arch, seed)
    grids = [rng.integers(-2, 3, grid_shape(H, W, l)).astype(np.int32) for l in range(7)]
    return bs.build(H, W, grids, arch, qparams=bs.quantize_params(params))


def cmd_bench(args) -> int:
    arch = get_arch(args.arch)
    if args.streams:
        streams = [Path(p).read_bytes() for p in args.streams]
    else:
        H, W = args.size
        streams = [_synthetic_stream(arch, H, W, args.seed)]
    decode_image(streams[0])  # warm-up (JIT compilation)
    runs = []
    for data in streams:
        for _ in range(args.runs):
            runs.append(decode_image(data)[1].timings)
    hdr = bs.parse(streams[0]).header
    summary = {"arch": hdr.arch.id, "kappa_dec": mac_per_pixel(hdr.arch, hdr.H, hdr.W, hdr.L).kappa_dec,
               "decode_ms_mean": float(np.mean([r["total"] for r in runs])),
               "arm_ms": float(np.mean([r["arm"] for r in runs])),
               "ups_ms": float(np.mean([r["upsample"] for r in runs])),
               "synth_ms": float(np.mean([r["synthesis"] for r in runs])),
               "backend": backend_name()}
    _write_json(args.json_timings or args.out, summary)
    return EXIT_OK


def cmd_no_train(args) -> int:
    images = [load_image(p) for p in args.images]
    spec = AnalysisSpec(L=args.levels, C=args.channels, blocks_per_level=args.blocks)
    patches = random_patches(images, args.patches, args.patch_size, args.seed)
    out = Path(args.out)
    for lam in args.lam:
        res = train_no(patches, lam, spec, arch=args.arch, max_steps=args.steps, seed=args.seed)
        path = out if len(args.lam) == 1 else out.with_name(f"{out.stem}_lam{lam:g}{out.suffix}")
        save_checkpoint(path, res)
        print(json.dumps({"checkpoint": str(path), "lambda": lam, "steps": res.steps,
                          "final_loss": res.history[-1][1]}))
    return EXIT_OK


def cmd_no_encode(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    img = load_image(args.image)
    t0 = time.perf_counter()
    data = no_encode(img, ckpt)
    out = Path(args.out or Path(args.image).with_suffix(".mch"))
    out.write_bytes(data)
    H, W = img.shape[:2]
    print(json.dumps({"out": str(out), "bytes": len(data), "bpp": 8.0 * len(data) / (H * W),
                      "encode_s": time.perf_counter() - t0}))
    return EXIT_OK


def cmd_info(args) -> int:
    data = Path(args.stream).read_bytes()
    stream = bs.parse(data)
    h = stream.header
    info = {"magic": bs.MAGIC.decode(), "version": bs.VERSION, "mode": "NO" if h.no_params else "OV",
            "H": h.H, "W": h.W, "L": h.L, "arch": h.arch.id, "bounds": [list(b) for b in h.bounds],
            "latent_bytes": len(stream.latents), "total_bytes": len(data),
            "bpp": 8.0 * len(data) / (h.H * h.W)}
    if not h.no_params:
        info["step_exps"] = list(h.step_exps)
        info["param_models"] = [list(m) for m in h.param_models]
        info["param_bytes"] = len(stream.params)
    print(json.dumps(info, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="minichic", description="Overfitted neural image codec")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, lam_many=False):
        sp.add_argument("--arch", type=int, choices=sorted(ARCHS), default=300)
        if lam_many:
            sp.add_argument("--lambda", dest="lam", type=float, nargs="+", default=[1e-3])
        else:
            sp.add_argument("--lambda", dest="lam", type=float, default=1e-3)
        sp.add_argument("--preset", choices=sorted(PRESETS), default="P1600")
        sp.add_argument("--iters", type=int, default=None, help="explicit iteration count (overrides --preset)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--levels", type=int, default=7)

    sp = sub.add_parser("encode", help="overfit and encode one image")
    sp.add_argument("image")
    common(sp)
    sp.add_argument("--out")
    sp.add_argument("--json-timings")
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="decode a bitstream to PNG/PPM")
    sp.add_argument("stream")
    sp.add_argument("--out")
    sp.add_argument("--checkpoint", help="shared decoder for N-O streams")
    sp.add_argument("--json-timings", help="write per-stage timings (ms) here; '-' for stdout")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("sweep", help="encode images at several lambdas, write CSV")
    sp.add_argument("images", nargs="*")
    common(sp, lam_many=True)
    sp.add_argument("--csv")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("bench", help="decode timing summary")
    sp.add_argument("streams", nargs="*")
    sp.add_argument("--arch", type=int, choices=sorted(ARCHS), default=300)
    sp.add_argument("--size", type=int, nargs=2, default=(512, 768), metavar=("H", "W"))
    sp.add_argument("--runs", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.add_argument("--json-timings")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("no-train", help="train an analysis transform and shared decoder")
    sp.add_argument("images", nargs="+")
    sp.add_argument("--arch", type=int, choices=sorted(ARCHS), default=2300)
    sp.add_argument("--lambda", dest="lam", type=float, nargs="+", default=[1e-3])
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--patches", type=int, default=20)
    sp.add_argument("--patch-size", type=int, default=256)
    sp.add_argument("--channels", type=int, default=64)
    sp.add_argument("--blocks", type=int, default=2)
    sp.add_argument("--levels", type=int, default=7)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_no_train)

    sp = sub.add_parser("no-encode", help="encode with a trained analysis transform")
    sp.add_argument("image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_no_encode)

    sp = sub.add_parser("info", help="print bitstream header fields")
    sp.add_argument("stream")
    sp.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"minichic: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"minichic: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
