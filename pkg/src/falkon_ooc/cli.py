"""Command line interface: train, predict, evaluate and micro-benchmarks."""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .errors import FalkonError
from .kernels import KernelSpec, PrecisionPolicy
from .memory import MemoryBudget, TransferLedger
from .metrics import METRICS, MetricReport, compute_metric

BINARY_METRICS = ("c-error", "one-minus-auc")


class _Phase:
    name = "startup"


def _workers(args) -> int:
    env = os.environ.get("FALKON_WORKERS")
    if env:
        try:
            w = int(env)
        except ValueError:
            raise ValueError(f"FALKON_WORKERS must be an integer, got {env!r}") from None
    else:
        w = args.workers
    if w < 1:
        raise ValueError("need at least one worker")
    return w


def _budget(args, policy) -> MemoryBudget:
    return MemoryBudget.from_megabytes(args.budget_mb, policy.working, _workers(args))


def _emit(report: MetricReport, args, extra: dict | None = None):
    print(report.lines())
    for k, v in (extra or {}).items():
        print(f"{k}={v}")
    if getattr(args, "json", False):
        print(report.to_json())


def cmd_train(args, phase):
    from .gsc import LOGISTIC, NewtonPath, gsc_falkon_fit
    from .io import load_dataset, save_model
    from .solver import Dataset, StreamConfig, falkon_fit

    policy = PrecisionPolicy.for_bits(args.precision)
    budget = _budget(args, policy)
    phase.name = "loading data"
    data = load_dataset(args.data, args.format, binary=args.loss == "logistic")
    if args.m > data.n:
        raise ValueError(f"m={args.m} exceeds the number of rows n={data.n}")
    kernel = KernelSpec(args.kernel, args.sigma)
    if args.precision == 64 and data.X.dtype != np.float64:
        data = Dataset(data.X.astype(np.float64), data.y)
    phase.name = "training"
    t0 = time.perf_counter()
    if args.loss == "squared":
        model = falkon_fit(data, kernel, args.lam, args.m, args.iters, args.seed, budget, policy=policy)
    else:
        path = NewtonPath.default(args.lam, args.newton_steps, t_inner=args.inner_iters, t_final=args.iters)
        model = gsc_falkon_fit(data, LOGISTIC, path, args.m, args.seed, kernel, budget,
                               cfg=StreamConfig(policy=policy), track_objective=False)
    total = time.perf_counter() - t0
    phase.name = "saving model"
    save_model(args.out, model)
    timings = dict(model.timings)
    timings["total"] = total
    print(f"model={args.out}")
    print(f"n={data.n} d={data.d} m={model.m}")
    for k, v in timings.items():
        print(f"time_{k}={v:.6f}")
    return 0


def cmd_predict(args, phase):
    from .io import load_dataset, load_model
    from .solver import predict

    phase.name = "loading model"
    model = load_model(args.model)
    phase.name = "loading data"
    data = load_dataset(args.data, args.format)
    phase.name = "prediction"
    preds = predict(model, data.X, MemoryBudget.from_megabytes(args.budget_mb))
    phase.name = "writing predictions"
    if args.out:
        np.savetxt(args.out, preds, fmt="%.17g")
    else:
        np.savetxt(sys.stdout, preds, fmt="%.17g")
    return 0


def cmd_evaluate(args, phase):
    from .io import load_dataset, load_model
    from .solver import predict

    phase.name = "loading model"
    model = load_model(args.model)
    phase.name = "loading data"
    data = load_dataset(args.data, args.format, binary=args.metric in BINARY_METRICS)
    phase.name = "prediction"
    t0 = time.perf_counter()
    preds = predict(model, data.X, MemoryBudget.from_megabytes(args.budget_mb))
    elapsed = time.perf_counter() - t0
    phase.name = "evaluation"
    report = compute_metric(args.metric, preds, data.y, {"predict": elapsed})
    _emit(report, args)
    return 0


def _bench_cholesky(args, rng, workers):
    from .ooc.cholesky import ooc_cholesky_inplace
    from .ooc.layout import TileLayout
    n, t = args.size, min(args.tile, args.size)
    B = rng.standard_normal((n, n))
    A = B @ B.T + n * np.eye(n)
    t0 = time.perf_counter()
    ref = np.linalg.cholesky(A)
    t_ref = time.perf_counter() - t0
    layout = TileLayout(n, t, workers)
    budget = MemoryBudget(3 * t * t, workers)
    ledger = TransferLedger()
    t0 = time.perf_counter()
    ooc_cholesky_inplace(A, layout, budget, ledger)
    t_ooc = time.perf_counter() - t0
    err = float(np.abs(np.tril(A) - ref).max())
    return (MetricReport("max-abs-error", err, n, {"ooc": t_ooc, "reference": t_ref}),
            {"peak_scratch": max(ledger.peak_scratch_per_worker.values()), "G": budget.G,
             "transferred": ledger.host_to_scratch_elements + ledger.scratch_to_host_elements})


def _bench_lauum(args, rng, workers):
    from .ooc.lauum import ooc_lauum_inplace, ooc_lauum_outofplace
    from .ooc.layout import TileLayout
    n, t = args.size, min(args.tile, args.size)
    U = np.triu(rng.standard_normal((n, n)))
    t0 = time.perf_counter()
    ref = np.triu(U @ U.T)
    t_ref = time.perf_counter() - t0
    layout = TileLayout(n, t, workers)
    budget = MemoryBudget((layout.N + 1) * t * t, workers)
    ledger = TransferLedger()
    out = np.zeros_like(U)
    t0 = time.perf_counter()
    ooc_lauum_outofplace(U, out, layout, budget, ledger)
    t_oop = time.perf_counter() - t0
    t0 = time.perf_counter()
    ooc_lauum_inplace(U, layout, budget, ledger)
    t_ip = time.perf_counter() - t0
    err = max(float(np.abs(np.triu(out) - ref).max()), float(np.abs(np.triu(U) - ref).max()))
    return (MetricReport("max-abs-error", err, n, {"out_of_place": t_oop, "in_place": t_ip, "reference": t_ref}),
            {"peak_scratch": max(ledger.peak_scratch_per_worker.values()), "G": budget.G})


def _bench_mvm(args, rng, workers):
    from .kernels import THIN_DATA_THRESHOLD, kernel_vecmul_fused
    from .solver import InducingSet, knm_predict, plan_for_budget
    n, m, d = args.size, args.m or max(1, args.size // 5), args.dim
    if d > THIN_DATA_THRESHOLD:
        raise ValueError(f"the fused path needs --dim <= {THIN_DATA_THRESHOLD}")
    X = rng.standard_normal((n, d))
    Xm = X[rng.choice(n, m, replace=False)]
    v = rng.standard_normal(m)
    kernel = KernelSpec.gaussian(args.sigma)
    t0 = time.perf_counter()
    fused = kernel_vecmul_fused(kernel, X, Xm, v)
    t_fused = time.perf_counter() - t0
    budget = MemoryBudget.from_megabytes(args.budget_mb, workers=1)
    plan = plan_for_budget(n, m, d, budget)
    t0 = time.perf_counter()
    mat = knm_predict(X, InducingSet(Xm), kernel, v, plan, budget)
    t_mat = time.perf_counter() - t0
    err = float(np.abs(fused - mat).max())
    from . import backend
    return (MetricReport("max-abs-error", err, n, {"fused": t_fused, "materialized": t_mat}),
            {"ratio": f"{t_fused / t_mat:.4f}", "backend": backend.NAME, "m": m, "d": d})


def _bench_pipeline(args, rng, workers):
    from .pipeline import StageDelays, run_pipeline
    B = args.batches
    delays = StageDelays(args.delay, args.delay, args.delay)
    noop = (lambda p, b: None, lambda p, b, x: None, lambda p, b, r: None)
    times = {}
    for mode, overlap in (("overlapped", True), ("serial", False)):
        t0 = time.perf_counter()
        run_pipeline(B, workers, *noop, overlap=overlap, delays=delays)
        times[mode] = time.perf_counter() - t0
    ratio = times["overlapped"] / times["serial"]
    model = (B + 2) / (3 * B) if workers == 1 else None
    return (MetricReport("overlap-ratio", ratio, B, times), {"model_ratio": model})


BENCHES = {"cholesky": _bench_cholesky, "lauum": _bench_lauum, "mvm": _bench_mvm, "pipeline": _bench_pipeline}


def cmd_bench(args, phase):
    phase.name = f"bench {args.kind}"
    rng = np.random.default_rng(args.seed)
    report, extra = BENCHES[args.kind](args, rng, _workers(args))
    _emit(report, args, extra)
    return 0


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _nonneg_float(s):
    v = float(s)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="falkon-ooc", description="Out-of-core Nystrom kernel solver")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--budget-mb", type=_positive_float, default=256.0, help="scratch per worker (MB)")
        p.add_argument("--workers", type=_positive_int, default=1)

    tr = sub.add_parser("train", help="fit a model")
    tr.add_argument("--data", required=True)
    tr.add_argument("--format", choices=("csv", "fbin", "libsvm"))
    tr.add_argument("--kernel", choices=("gaussian", "linear"), default="gaussian")
    tr.add_argument("--sigma", type=_positive_float, default=1.0)
    tr.add_argument("--lambda", dest="lam", type=_nonneg_float, default=1e-6)
    tr.add_argument("--m", type=_positive_int, required=True)
    tr.add_argument("--iters", type=_positive_int, default=20)
    tr.add_argument("--inner-iters", type=_positive_int, default=10, help="CG iterations per inner Newton step")
    tr.add_argument("--loss", choices=("squared", "logistic"), default="squared")
    tr.add_argument("--newton-steps", type=_positive_int, default=9)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--precision", type=int, choices=(32, 64), default=64)
    tr.add_argument("--out", required=True)
    common(tr)
    tr.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict with a saved model")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--format", choices=("csv", "fbin", "libsvm"))
    pr.add_argument("--out")
    common(pr)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("evaluate", help="score a saved model on a dataset")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--format", choices=("csv", "fbin", "libsvm"))
    ev.add_argument("--metric", choices=METRICS, default="rmse")
    ev.add_argument("--json", action="store_true")
    common(ev)
    ev.set_defaults(func=cmd_evaluate)

    be = sub.add_parser("bench", help="linear algebra micro-benchmarks")
    be.add_argument("kind", choices=tuple(BENCHES))
    be.add_argument("--size", type=_positive_int, default=1024)
    be.add_argument("--tile", type=_positive_int, default=128)
    be.add_argument("--m", type=_positive_int, help="inducing points for mvm (default size/5)")
    be.add_argument("--dim", type=_positive_int, default=16, help="feature dimension for mvm")
    be.add_argument("--sigma", type=_positive_float, default=1.0)
    be.add_argument("--batches", type=_positive_int, default=16, help="batches for the pipeline bench")
    be.add_argument("--delay", type=_nonneg_float, default=0.02, help="injected stage delay (s)")
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--json", action="store_true")
    common(be)
    be.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    phase = _Phase()
    try:
        return args.func(args, phase)
    except (FalkonError, ValueError, OSError, ArithmeticError) as exc:
        print(f"error during {phase.name}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
