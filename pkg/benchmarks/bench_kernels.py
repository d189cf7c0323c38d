"""Time the hot kernels under the numba backend and the pure-numpy fallback.

Each backend runs in its own interpreter because the switch is read at import
time. Usage:

    python benchmarks/bench_kernels.py [--size H W] [--repeat N] [--json out.json]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from minichic._jit import backend_name
from minichic.arm import FixedArm, decode_pyramid, encode_pyramid
from minichic.decoder import DecoderParams, FixedDecoder
from minichic.latent import grid_shape
from minichic.tensor import Tensor, depthwise_conv2d

H, W, repeat = int(sys.argv[1]), int(sys.argv[2]), int(sys.argv[3])
rng = np.random.default_rng(0)
params = DecoderParams.init(300, 0)
fdec = FixedDecoder.from_params(params)
grids = [rng.integers(-3, 4, grid_shape(H, W, l)) for l in range(7)]
dense = fdec.upsample(grids, H, W)
x = Tensor(rng.normal(size=(1, 64, H // 2, W // 2)).astype(np.float32))
wdw = Tensor(rng.normal(size=(64, 7, 7)).astype(np.float32))


def best(fn):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * min(times)


data, bounds = encode_pyramid(grids, fdec.arm)
shapes = [g.shape for g in grids]
res = {
    "backend": backend_name(),
    "latent_encode_ms": best(lambda: encode_pyramid(grids, fdec.arm)),
    "latent_decode_ms": best(lambda: decode_pyramid(data, shapes, bounds, fdec.arm)),
    "upsample_ms": best(lambda: fdec.upsample(grids, H, W)),
    "synthesis_ms": best(lambda: fdec.synthesize(dense)),
    "depthwise_ms": best(lambda: depthwise_conv2d(x, wdw, None, 1)),
}
print(json.dumps(res))
"""


def run_backend(numba: bool, H: int, W: int, repeat: int) -> dict:
    env = dict(os.environ, MINICHIC_DISABLE_NUMBA="0" if numba else "1")
    out = subprocess.run([sys.executable, "-c", WORKER, str(H), str(W), str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, nargs=2, default=(128, 192), metavar=("H", "W"))
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    results = [run_backend(flag, *args.size, args.repeat) for flag in (True, False)]
    keys = [k for k in results[0] if k.endswith("_ms")]
    print(f"A300 kernels at {args.size[0]}x{args.size[1]} (best of {args.repeat})")
    print(f"{'kernel':<20}{'numba ms':>12}{'numpy ms':>12}{'speed-up':>10}")
    for k in keys:
        a, b = results[0][k], results[1][k]
        print(f"{k[:-3]:<20}{a:>12.1f}{b:>12.1f}{b / a:>9.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
