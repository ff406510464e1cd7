"""Compare the compiled kernels with the numpy fallback.

Run from the repository root:

    python benchmarks/bench_kernels.py [--repeat 20] [--steps 5]

Per-kernel timings call both implementations directly on the same inputs.
The train-step timing runs one subprocess per backend, since the backend is
fixed at import time.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from subseg._kernels import _fallback

try:
    from subseg._kernels import _native
except ImportError:
    _native = None

STEP_SNIPPET = """
import sys, time
from dataclasses import replace
from subseg._kernels import BACKEND
from subseg.core import Rng
from subseg.data import make_dataset
from subseg.segnet import SegNet
from subseg.trainer import TrainConfig, build_batch, train_step
base = TrainConfig()
cfg = replace(base, model=replace(base.model, enable_pc=True, enable_sn=True), enable_hm=True)
split = make_dataset(16, 4, seed=0, n_val=0, n_test=0)
net = SegNet(cfg.model, seed=0)
steps = int(sys.argv[1])
train_step(build_batch(split, cfg, Rng(0)), net, 0, cfg)
t0 = time.perf_counter()
for it in range(1, steps + 1):
    train_step(build_batch(split, cfg, Rng(it)), net, it, cfg)
print(BACKEND, (time.perf_counter() - t0) / steps)
"""


def kernel_cases(dtype=np.float32):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 16, 32, 32)).astype(dtype)
    cols = np.empty((16 * 9, 8 * 32 * 32), dtype)
    dx = np.empty_like(x)
    pooled = np.empty((8, 16, 16, 16), dtype)
    arg = np.empty(pooled.shape, np.int8)
    dout = rng.standard_normal(pooled.shape).astype(dtype)
    state = np.array([1, 2, 3, 4], np.uint64)
    draws = np.empty(4096, np.uint64)
    _fallback.im2col3(x, cols)
    _fallback.maxpool2_forward(x, pooled, arg)
    return {
        "im2col3": lambda k: k.im2col3(x, cols),
        "col2im3": lambda k: k.col2im3(cols, dx),
        "maxpool2_forward": lambda k: k.maxpool2_forward(x, pooled, arg),
        "maxpool2_backward": lambda k: k.maxpool2_backward(dout, arg, dx),
        "upsample2_backward": lambda k: k.upsample2_backward(x, pooled),
        "xoshiro_fill(4096)": lambda k: k.xoshiro_fill(state.copy(), draws),
    }


def best_of(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def step_time(backend: str, steps: int) -> str:
    env = {**os.environ, "SUBSEG_KERNELS": backend}
    proc = subprocess.run([sys.executable, "-c", STEP_SNIPPET, str(steps)], env=env,
                          capture_output=True, text=True)
    if proc.returncode != 0:
        return f"error: {proc.stderr.strip().splitlines()[-1]}"
    return f"{float(proc.stdout.split()[1]) * 1e3:9.1f} ms"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5, help="train steps timed per backend (0 skips)")
    args = ap.parse_args(argv)

    if _native is None:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'kernel':<22}{'python':>12}{'native':>12}{'speedup':>10}")
    for name, call in kernel_cases().items():
        py = best_of(lambda: call(_fallback), args.repeat)
        if _native is None:
            print(f"{name:<22}{py * 1e3:10.3f}ms")
            continue
        nat = best_of(lambda: call(_native), args.repeat)
        print(f"{name:<22}{py * 1e3:10.3f}ms{nat * 1e3:10.3f}ms{py / nat:9.1f}x")

    if args.steps > 0:
        print("\ntrain step (PC+SN+HM, batch 8, 32x32 patches)")
        for backend in ("python", "native"):
            print(f"  {backend:<8}{step_time(backend, args.steps)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
