#!/usr/bin/env python3
"""Micro-benchmark for the selective-scan kernels.

Compares three routes on the same random instance:
  - sequential reference (one numpy step per position; the oracle)
  - fast path, pure-numpy blocked kernel  (RELIGHT_SCAN_BACKEND=numpy)
  - fast path, numba kernel               (RELIGHT_SCAN_BACKEND=numba)

The fast path is expected to beat the sequential reference by at least 2x
on length 4096 (soft threshold; numbers vary by machine). Run:

    python benchmarks/bench_scan.py [--length 4096] [--iters 5]
"""

import argparse
import time

import numpy as np

from relight import backend
from relight.scan import ScanInputs, selective_scan_fast, selective_scan_seq


def make_instance(rng, batch=2, length=4096, channels=16, state=16):
    inputs = ScanInputs(
        u=rng.standard_normal((batch, length, channels)).astype(np.float32),
        delta=rng.uniform(0.05, 2.0, (batch, length, channels)).astype(np.float32),
        b_sel=rng.standard_normal((batch, length, state)).astype(np.float32),
        c_sel=rng.standard_normal((batch, length, state)).astype(np.float32),
    )
    a = -np.exp(rng.uniform(0.0, 2.0, (channels, state))).astype(np.float32)
    d = rng.standard_normal(channels).astype(np.float32)
    return inputs, a, d


def timeit(fn, iters):
    fn()  # warmup / jit compile
    t0 = time.perf_counter()
    for _ in range(iters):
        out = fn()
    return (time.perf_counter() - t0) / iters, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--length", type=int, default=4096)
    ap.add_argument("--iters", type=int, default=5)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--state", type=int, default=16)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    inputs, a, d = make_instance(rng, args.batch, args.length, args.channels, args.state)
    print(
        f"instance: batch={args.batch} length={args.length} "
        f"channels={args.channels} state={args.state}, float32"
    )

    t_seq, y_seq = timeit(lambda: selective_scan_seq(inputs, a, d), max(1, args.iters // 2))
    print(f"sequential reference : {t_seq * 1e3:10.2f} ms")

    rows = []
    for name in ("numpy", "numba") if backend.HAS_NUMBA else ("numpy",):
        backend.set_scan_backend(name)
        t_fast, y_fast = timeit(lambda: selective_scan_fast(inputs, a, d), args.iters)
        dev = float(np.abs(y_fast - y_seq).max())
        rows.append((name, t_fast, t_seq / t_fast, dev))
    backend.set_scan_backend("auto")

    for name, t_fast, speedup, dev in rows:
        flag = "ok" if speedup >= 2.0 else "below 2x soft threshold"
        print(
            f"fast path ({name:5s})    : {t_fast * 1e3:10.2f} ms   "
            f"speedup {speedup:7.1f}x   max|dev| {dev:.2e}   [{flag}]"
        )
    if not backend.HAS_NUMBA:
        print("numba not installed; numpy fallback only")


if __name__ == "__main__":
    main()
