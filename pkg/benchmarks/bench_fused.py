"""Compare the compiled fused kernel-vector product with the numpy fallback.

Also times the materialize-then-multiply path for reference.

    python3 benchmarks/bench_fused.py --n 20000 --m 4000 --d 16
"""
import argparse
import time

import numpy as np

from falkon_ooc import _fused_py
from falkon_ooc.kernels import KernelSpec, eval_kernel_block, kernel_vecmul_fused

try:
    from falkon_ooc import _fused
except ImportError:
    _fused = None


def timed(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--m", type=int, default=4000)
    ap.add_argument("--d", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--chunk", type=int, default=4096, help="row chunk of the materialized path")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    X = rng.standard_normal((args.n, args.d))
    Xm = rng.standard_normal((args.m, args.d))
    v = rng.standard_normal(args.m)
    k = KernelSpec.gaussian(np.sqrt(args.d))

    def materialized():
        out = np.empty(args.n)
        for i in range(0, args.n, args.chunk):
            out[i:i + args.chunk] = eval_kernel_block(k, X[i:i + args.chunk], Xm) @ v
        return out

    t_mat, ref = timed(materialized, args.repeat)
    rows = [("materialized", t_mat, 0.0)]
    impls = [("python", _fused_py)]
    if _fused is not None:
        impls.insert(0, ("compiled", _fused))
    for name, impl in impls:
        t, out = timed(lambda: kernel_vecmul_fused(k, X, Xm, v, impl=impl), args.repeat)
        rows.append((f"fused/{name}", t, float(np.abs(out - ref).max() / np.abs(ref).max())))

    print(f"n={args.n} m={args.m} d={args.d}")
    print(f"{'path':<18}{'seconds':>10}{'vs materialized':>18}{'rel err':>12}")
    for name, t, err in rows:
        print(f"{name:<18}{t:>10.3f}{t / t_mat:>18.3f}{err:>12.1e}")


if __name__ == "__main__":
    main()
