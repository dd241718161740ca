"""Compare the compiled and NumPy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 200] [--e2e]

Prints median microseconds per call for each kernel at a few batch shapes,
and optionally the wall time of a short Phase-1 run under each backend.
"""

import argparse
import statistics
import time

import numpy as np

from pfedgm import kernels

SHAPES = [(50, 5, 8), (200, 10, 16), (1000, 10, 32)]  # (n, K, d)


def _inputs(n, K, d, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, d))
    y = rng.integers(0, K, n)
    means = rng.standard_normal((K, d))
    prec = rng.uniform(0.5, 2.0, (K, d))
    bias = rng.standard_normal(K)
    present = (rng.random(K) > 0.2).astype(np.uint8)
    fusion = (z, y, means, prec, rng.uniform(0.5, 1.5, d), rng.standard_normal((K, d)),
              rng.uniform(0.1, 1.5, d), 1.0 / d, present, bias)
    return (z, y, means, prec, bias), fusion


def _time(fn, repeat):
    fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples) * 1e6


def bench_kernels(repeat):
    rows = []
    for n, K, d in SHAPES:
        mix, fus = _inputs(n, K, d)
        calls = {
            "mixture_logits": lambda: kernels.mixture_logits(mix[0], *mix[2:]),
            "mixture_ce_grads": lambda: kernels.mixture_ce_grads(*mix),
            "fusion_logits": lambda: kernels.fusion_logits(fus[0], *fus[2:]),
            "fusion_ce_grads": lambda: kernels.fusion_ce_grads(*fus),
        }
        for name, fn in calls.items():
            t = {}
            for b in sorted(kernels.BACKENDS):
                kernels.use_backend(b)
                t[b] = _time(fn, repeat)
            rows.append((name, f"{n}x{K}x{d}", t))
    return rows


def bench_e2e():
    from pfedgm.experiment import default_config, run_experiment

    out = {}
    for b in sorted(kernels.BACKENDS):
        kernels.use_backend(b)
        cfg = default_config("pfedgm", 0)
        cfg.train.rounds = 20
        t0 = time.perf_counter()
        run_experiment(cfg, write=False)
        out[b] = time.perf_counter() - t0
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--e2e", action="store_true", help="also time a 20-round pfedgm run")
    args = ap.parse_args()
    prev = kernels.backend_name()
    backends = sorted(kernels.BACKENDS)
    if "cython" not in backends:
        print("compiled extension not built; only the NumPy backend is available")
    print(f"{'kernel':18s} {'n x K x d':>12s} " + " ".join(f"{b + ' us':>12s}" for b in backends)
          + ("   speedup" if len(backends) > 1 else ""))
    try:
        for name, shape, t in bench_kernels(args.repeat):
            line = f"{name:18s} {shape:>12s} " + " ".join(f"{t[b]:12.1f}" for b in backends)
            if len(backends) > 1:
                line += f"   {t['python'] / t['cython']:7.2f}x"
            print(line)
        if args.e2e:
            for b, s in bench_e2e().items():
                print(f"20-round pfedgm run, {b}: {s:.2f}s")
    finally:
        kernels.use_backend(prev)


if __name__ == "__main__":
    main()
