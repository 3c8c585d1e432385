"""Timing comparison of the compiled and numpy kernel backends.

Measures the two fused hot kernels on pooled-gram-sized inputs and,
optionally, a full training epoch per backend.  Run from the repo root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --end-to-end
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from paalign import _kernels
from paalign._kernels import _numpy as ref

LADDER = (0.25, 0.5, 1.0, 2.0, 4.0)


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(sizes, repeats):
    rng = np.random.default_rng(0)
    print(f"backend in use: {_kernels.BACKEND}")
    header = f"{'kernel':<14}{'n':>6}{'numpy ms':>12}{'compiled ms':>14}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for n in sizes:
        x = rng.normal(size=(n, 128))
        d2 = _kernels.pairwise_sqdist(x)
        h = _kernels.median_bandwidth(d2)
        t_np = best_of(lambda: ref.gauss_forward(d2, h, LADDER), repeats)
        if _kernels.BACKEND == "compiled":
            t_fast = best_of(lambda: _kernels.gauss_forward(d2, h, LADDER), repeats)
            ratio = f"{t_np / t_fast:9.2f}x"
        else:
            t_fast, ratio = float("nan"), "      n/a"
        print(f"{'gauss_forward':<14}{n:>6}{t_np * 1e3:>12.2f}{t_fast * 1e3:>14.2f}{ratio:>10}")

        phi = np.tanh(rng.normal(size=(n, n)))
        mu = (rng.random((n, n)) < 0.5).astype(np.float64)
        mask = (rng.random((n, n)) < 0.7).astype(np.float64)
        t_np = best_of(lambda: ref.pair_bce(phi, mu, mask, 1e-7), repeats)
        if _kernels.BACKEND == "compiled":
            t_fast = best_of(lambda: _kernels.pair_bce(phi, mu, mask, 1e-7), repeats)
            ratio = f"{t_np / t_fast:9.2f}x"
        else:
            t_fast, ratio = float("nan"), "      n/a"
        print(f"{'pair_bce':<14}{n:>6}{t_np * 1e3:>12.2f}{t_fast * 1e3:>14.2f}{ratio:>10}")


_EPOCH_SNIPPET = """
import time
from paalign import _kernels
from paalign.data import standard_pair, protocol_splits
from paalign.trainer import PaaConfig, Trainer, validate_config

src, tgt = standard_pair(1)
fold = protocol_splits(src, tgt, 1)[0]
cfg = validate_config(PaaConfig(variant="M", epochs=3, seed=1))
t = Trainer(cfg, fold.train_source, fold.train_target, fold.test)
t.run_epoch()  # warm-up
t0 = time.perf_counter()
t.run_epoch()
t.run_epoch()
print(f"{_kernels.BACKEND}: {(time.perf_counter() - t0) / 2:.3f} s/epoch")
"""


def bench_end_to_end():
    print("\nper-epoch training time (variant M, protocol-1 fold):")
    for force in ("0", "1"):
        env = dict(os.environ, PAALIGN_FORCE_NUMPY=force)
        out = subprocess.run(
            [sys.executable, "-c", _EPOCH_SNIPPET],
            capture_output=True, text=True, env=env, check=True,
        )
        print("  " + out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="128,256,512,1024",
                    help="comma-separated pooled batch sizes")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true",
                    help="also time a full training epoch per backend")
    args = ap.parse_args()
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    bench_kernels(sizes, args.repeats)
    if args.end_to_end:
        bench_end_to_end()


if __name__ == "__main__":
    main()
