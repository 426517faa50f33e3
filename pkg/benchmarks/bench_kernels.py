"""Head-to-head timing of the compiled kernel core against the numpy
fallback, plus a bitwise-equality audit on random inputs.

Run from the repository root:

    python benchmarks/bench_kernels.py [--repeats N] [--pipeline]

The kernel table times each hot routine on both backends in-process
(the implementation modules are imported directly, bypassing the
env-var selection). --pipeline additionally times one full evaluation
forward per backend in fresh subprocesses, since the backend binds at
import time.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from v2xfuse.kernels import py as py_impl

try:
    from v2xfuse.kernels import _core as c_impl
except ImportError:
    c_impl = None

KERNELS = ("matmul", "row_sum", "sum_all", "attn_mix")


def make_inputs(rng, name, n):
    if name == "matmul":
        return (rng.standard_normal((n, n)), rng.standard_normal((n, n)))
    if name == "attn_mix":
        p = rng.uniform(size=(n, n))
        p /= p.sum(axis=1, keepdims=True)
        return (p, rng.standard_normal((n, n)))
    return (rng.standard_normal((n, n)),)


def best_of(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def audit_bitwise(rng, trials=50):
    """Both backends must agree bit for bit on every routine."""
    for _ in range(trials):
        n = int(rng.integers(2, 40))
        for name in KERNELS:
            args = make_inputs(rng, name, n)
            got_c = getattr(c_impl, name)(*args)
            got_py = getattr(py_impl, name)(*args)
            if not np.array_equal(np.asarray(got_c), np.asarray(got_py)):
                raise AssertionError(f"{name} diverges at n={n}")
    print(f"bitwise audit: {trials} random trials x {len(KERNELS)} "
          f"kernels, all equal")


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<10} {'n':>5} {'compiled':>12} {'numpy':>12} "
          f"{'ratio':>7}")
    for name in KERNELS:
        # attn_mix is cubic with a heavy inner loop; keep it small so
        # the default run stays under a minute.
        sizes = (32, 64, 128) if name == "attn_mix" else (32, 128, 512)
        for n in sizes:
            args = make_inputs(rng, name, n)
            getattr(c_impl, name)(*args)  # warm both paths
            getattr(py_impl, name)(*args)
            t_c = best_of(getattr(c_impl, name), args, repeats)
            t_py = best_of(getattr(py_impl, name), args, repeats)
            print(f"{name:<10} {n:>5} {t_c * 1e6:>10.1f}us "
                  f"{t_py * 1e6:>10.1f}us {t_py / t_c:>7.2f}x")


PIPELINE_SNIPPET = """
import time
from v2xfuse import kernels
from v2xfuse.pipeline import RunConfig, build_model, run_pipeline
from v2xfuse.scenario import gen_scenario
cfg = RunConfig(seed=7, grid_h=8, grid_w=8)
scn = gen_scenario(cfg.seed, cfg.difficulty)
model, ctx = build_model(cfg)
run_pipeline(scn, cfg, model, ctx)  # warm
t0 = time.perf_counter()
for _ in range(5):
    run_pipeline(scn, cfg, model, ctx)
print(f"{kernels.BACKEND} {(time.perf_counter() - t0) / 5:.4f}")
"""


def bench_pipeline():
    print("\nfull evaluation forward (8x8 grid, averaged over 5 runs):")
    for backend in ("c", "py"):
        env = dict(os.environ, V2XFUSE_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", PIPELINE_SNIPPET],
                             env=env, capture_output=True, text=True)
        if out.returncode != 0:
            print(f"  backend {backend}: FAILED\n{out.stderr}")
            continue
        used, seconds = out.stdout.split()
        print(f"  backend {used}: {float(seconds) * 1e3:.1f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20,
                    help="timing repetitions per kernel (best-of)")
    ap.add_argument("--pipeline", action="store_true",
                    help="also time one full forward per backend")
    args = ap.parse_args()

    if c_impl is None:
        print("compiled core not importable; nothing to compare",
              file=sys.stderr)
        return 1
    audit_bitwise(np.random.default_rng(1))
    bench_kernels(args.repeats)
    if args.pipeline:
        bench_pipeline()
    return 0


if __name__ == "__main__":
    sys.exit(main())
