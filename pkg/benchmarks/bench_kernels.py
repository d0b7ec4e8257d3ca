"""Time the numba kernels against their numpy counterparts.

Usage: python benchmarks/bench_kernels.py [--points N] [--repeat R]

The first numba call (JIT compile or cache load) is reported separately
from the steady-state timings.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from gsgraph import kernels


def _best(fn, args, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n: int, rng: np.random.Generator) -> dict:
    h, w = 240, 320
    px = rng.integers(0, w, size=n)
    py = rng.integers(0, h, size=n)
    depth = rng.uniform(0.5, 5.0, size=n)
    off = kernels.disc_offsets(2)
    pts = rng.normal(size=(n, 3))
    feats = np.concatenate([rng.normal(loc=10 * k, size=(n // 4, 6)) for k in range(4)])
    centers = np.array([[10.0 * k] * 6 for k in range(4)])
    return {
        "rasterize_nearest": ((px, py, depth, h, w, off),),
        "stamp_coverage": ((px, py, depth, h, w, off),),
        "fps": ((pts, 0, 256),),
        "follow_assign": ((feats, centers, np.ones(4, dtype=np.int64), 5.0),),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=50_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<20}{'first numba':>14}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    for name, (call_args,) in cases(args.points, rng).items():
        nb = getattr(kernels, f"{name}_numba")
        np_fn = getattr(kernels, f"{name}_numpy")
        t0 = time.perf_counter()
        nb(*call_args)
        first = time.perf_counter() - t0
        t_nb = _best(nb, call_args, args.repeat)
        t_np = _best(np_fn, call_args, args.repeat)
        print(f"{name:<20}{first:>13.3f}s{t_nb:>11.4f}s{t_np:>11.4f}s{t_np / max(t_nb, 1e-9):>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
