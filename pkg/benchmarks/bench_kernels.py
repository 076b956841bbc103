"""Time the compiled and pure-Python detector-dynamics kernels on the same input.

Usage: python3 benchmarks/bench_kernels.py [--slots N] [--repeat R]
"""
from __future__ import annotations

import argparse
import math
import time

import numpy as np

from mdiqkd import kernels


def make_input(n: int, seed: int = 0):
    """Raw patterns with id201-like click density plus afterpulse candidates."""
    rng = np.random.default_rng(seed)
    p = np.array([0.004, 0.004, 0.004, 0.004])
    raw = ((rng.random((n, 4)) < p) @ (1 << np.arange(4))).astype(np.uint8)
    ap = ((rng.random((n, 4)) < 1e-5) @ (1 << np.arange(4))).astype(np.uint8)
    return raw, ap


def bench(backend: str, raw, ap, repeat: int) -> float:
    args = (0.5e-6, 2.5e-9, (10e-6, 10e-6), (math.inf, math.inf))
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        kernels.apply_detector_dynamics(raw, *args, ap_raw=ap, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--slots", type=int, default=2_000_000)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)

    raw, ap = make_input(args.slots)
    results = {"python": bench("python", raw, ap, args.repeat)}
    if kernels.BACKEND == "cython":
        results["cython"] = bench("cython", raw, ap, args.repeat)
    for name, sec in results.items():
        print(f"{name:>7}: {sec * 1e3:9.2f} ms  ({args.slots / sec / 1e6:8.2f} M slots/s)")
    if "cython" in results:
        print(f"speed-up: {results['python'] / results['cython']:.1f}x")
    else:
        print("compiled kernels not available; only the fallback was timed")


if __name__ == "__main__":
    main()
