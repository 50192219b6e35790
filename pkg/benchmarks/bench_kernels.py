#!/usr/bin/env python3
"""Benchmark the numba-jitted kernels against the vectorized numpy
fallback, plus the end-to-end per-frame inference path.

Run: python3 benchmarks/bench_kernels.py [--frames 300] [--vehicles 40]

The backend used by the package itself is chosen at import time from the
MIDAR_NUMBA environment variable; this script times both implementations
in one process via kernels.backend_variants().
"""

import argparse
import statistics
import time

import numpy as np

from midar import kernels
from midar.dataio import synth_scenes
from midar.model import forward, init_params


def time_call(fn, *args, repeat=200):
    fn(*args)  # warm-up / JIT
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def bench_kernels(n_boxes):
    rng = np.random.default_rng(0)
    boxes = kernels.pack_boxes(
        rng.uniform(-50, 50, size=n_boxes),
        rng.uniform(-50, 50, size=n_boxes),
        rng.uniform(-np.pi, np.pi, size=n_boxes),
        rng.uniform(3.5, 12.0, size=n_boxes),
        rng.uniform(1.6, 2.8, size=n_boxes))
    txs = rng.uniform(-50, 50, size=n_boxes)
    tys = rng.uniform(-50, 50, size=n_boxes)

    variants = kernels.backend_variants()
    rows = []
    for op, args in (("segment_hits_boxes", (0.0, 0.0, 30.0, 20.0, boxes)),
                     ("occlusion_matrix", (txs, tys, boxes))):
        timings = {name: time_call(impl[op], *args)
                   for name, impl in variants.items()}
        rows.append((f"{op} (n={n_boxes})", timings))
    return rows


def bench_inference(n_frames, density):
    corpus = synth_scenes(5, n_frames, density=density)
    frames = [f for f, _ in corpus]
    params = init_params(hidden_dim=128, iterations=6, alpha=0.1, seed=0)
    for f in frames[: min(20, len(frames))]:
        forward(f, params)
    samples = []
    for f in frames:
        t0 = time.perf_counter()
        forward(f, params)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--frames", type=int, default=300)
    parser.add_argument("--vehicles", type=int, default=40)
    args = parser.parse_args()

    print(f"active backend: {kernels.BACKEND}")
    print()
    print(f"{'kernel':<38} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for name, timings in bench_kernels(args.vehicles):
        np_us = timings["numpy"] * 1e6
        if "numba" in timings:
            nb_us = timings["numba"] * 1e6
            print(f"{name:<38} {np_us:>10.1f}us {nb_us:>10.1f}us "
                  f"{np_us / nb_us:>8.1f}x")
        else:
            print(f"{name:<38} {np_us:>10.1f}us {'-':>12} {'-':>9}")

    median = bench_inference(args.frames, density=float(args.vehicles))
    print()
    print(f"end-to-end inference median over {args.frames} frames "
          f"(~{args.vehicles} vehicles, backend={kernels.BACKEND}): "
          f"{median * 1e3:.3f} ms")


if __name__ == "__main__":
    main()
