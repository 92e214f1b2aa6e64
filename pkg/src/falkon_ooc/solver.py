"""Nystrom kernel ridge regression with a preconditioned conjugate gradient.

The reduced system ``(K_nm^T K_nm + lam n K_mm) alpha = K_nm^T y`` is solved
in the preconditioned variable ``beta`` with ``alpha = T^{-1} A^{-1} beta``.
Thanks to ``K_mm = T^T T`` the operator needs K_mm only through the factors:

    LinOp(beta) = A^{-T} (T^{-T} K_nm^T K_nm T^{-1} A^{-1} beta + lam n A^{-1} beta)

K_nm is never stored: every product with it streams row batches of the data
through worker scratch, where the kernel block is formed, used and dropped.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg.blas import get_blas_funcs

from .errors import BudgetError, DimensionMismatchError, DivergenceError
from .kernels import (DEFAULT_POLICY, KernelSpec, PrecisionPolicy, _gaussian_from_cross, as_matrix,
                      fused_eligible, kernel_vecmul_fused, row_squared_norms)
from .memory import KNM_TAG, MemoryBudget, TransferLedger
from .pipeline import NO_DELAYS, OrderedReducer, StageDelays, run_pipeline
from .preconditioner import PreconditionerBuffer, apply_prec, build_preconditioner

DEFAULT_BUDGET = MemoryBudget(2**26)


@dataclass(frozen=True)
class Dataset:
    X: object
    y: np.ndarray | None = None

    def __post_init__(self):
        X = as_matrix(self.X)
        object.__setattr__(self, "X", X)
        if self.y is not None:
            y = np.asarray(self.y, dtype=np.float64).ravel()
            if y.shape[0] != X.shape[0]:
                raise DimensionMismatchError(f"dimension mismatch: {X.shape[0]} rows but {y.shape[0]} targets")
            object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def sparse(self) -> bool:
        return sp.issparse(self.X)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], None if self.y is None else self.y[idx])


@dataclass(frozen=True)
class InducingSet:
    X_m: object
    indices: np.ndarray | None = None
    seed: int | None = None

    @property
    def m(self) -> int:
        return self.X_m.shape[0]


def subsample_inducing(data: Dataset, m: int, seed) -> InducingSet:
    """``m`` distinct rows drawn uniformly without replacement."""
    if not 1 <= m <= data.n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={data.n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(data.n, size=m, replace=False)
    return InducingSet(data.X[idx], idx, seed)


# -- batch planning -----------------------------------------------------------

@dataclass(frozen=True)
class BatchPlan:
    """Block extents along n (q), m (r) and d (s)."""

    q: int
    r: int
    s: int
    n: int

    @property
    def B(self) -> int:
        return -(-self.n // self.q)


def plan_batches(n: int, m: int, d: int, G: int) -> BatchPlan:
    """Maximize ``q r s / (q s + d s)`` subject to ``q s + d s <= G``.

    The ratio equals ``r q / (q + d)``: it grows with ``r`` and ``q`` and does
    not depend on ``s``. So ``r = m``, ``q`` is as large as ``s = 1`` allows,
    and ``s`` then takes whatever room is left (ties go to larger ``s``).
    """
    if min(n, m, d) < 1:
        raise ValueError("n, m and d must be positive")
    if G < 1 + d:
        raise BudgetError(f"budget G={G} cannot hold one row and one feature column (d={d})")
    q = min(n, G - d)
    s = min(d, G // (q + d))
    return BatchPlan(q, m, s, n)


def _xb_elements(q, d, itemsize, nnz=None):
    if nnz is None:
        return q * d
    return -(-(nnz * (itemsize + 4) + (q + 1) * 4) // itemsize)


def stream_footprint(q: int, s: int, m: int, d: int, itemsize: int = 8, nnz: int | None = None) -> int:
    """Peak scratch (working-precision elements) of one worker streaming a plan.

    Persistent: K_mm row norms plus two m-vectors. Two data slots: a batch of
    rows plus two batch vectors. Compute: the kernel block, one feature chunk
    of X_m and of the batch, four batch vectors. Two result slots.
    """
    rho = 8 // itemsize
    xb = _xb_elements(q, d, itemsize, nnz)
    return (3 * rho * m + 2 * (xb + 2 * rho * q) + rho * (q * m + m * s + q * s + 4 * q)
            + 2 * rho * max(m, q))


def _max_batch_nnz(X, q):
    ip = X.indptr
    starts = np.arange(0, X.shape[0], q)
    ends = np.minimum(starts + q, X.shape[0])
    return int((ip[ends] - ip[starts]).max())


def plan_for_budget(n: int, m: int, d: int, budget: MemoryBudget, policy: PrecisionPolicy = DEFAULT_POLICY,
                    X=None) -> BatchPlan:
    """The plan whose real streaming footprint fits ``budget.G``.

    Dense data: the largest planner budget ``G' <= G`` for which
    :func:`plan_batches` yields a plan that fits. CSR data is not chunked
    along features, so only ``q`` is searched, using exact per-batch nnz.
    """
    itemsize = policy.working.itemsize
    G = budget.G
    if X is not None and sp.issparse(X):
        def fits(q):
            return stream_footprint(q, 0, m, 0, itemsize, _max_batch_nnz(X, q)) <= G
        if not fits(1):
            raise BudgetError(f"budget G={G} cannot stream a single row against m={m} inducing points")
        lo, hi = 1, n
        while lo < hi:
            mid = (lo + hi + 1) // 2
            lo, hi = (mid, hi) if fits(mid) else (lo, mid - 1)
        return BatchPlan(lo, m, d, n)

    def fits_g(g):
        p = plan_batches(n, m, d, g)
        return stream_footprint(p.q, p.s, m, d, itemsize) <= G
    lo = 1 + d
    if lo > G or not fits_g(lo):
        raise BudgetError(f"budget G={G} cannot stream a single row against m={m} inducing points")
    hi = G
    while lo < hi:
        mid = (lo + hi + 1) // 2
        lo, hi = (mid, hi) if fits_g(mid) else (lo, mid - 1)
    return plan_batches(n, m, d, lo)


# -- streamed kernel products ---------------------------------------------------

@dataclass
class StreamConfig:
    """Execution knobs for the batched products."""

    policy: PrecisionPolicy = DEFAULT_POLICY
    overlap: bool = True
    delays: StageDelays = NO_DELAYS


DEFAULT_STREAM = StreamConfig()


def stream_kernel_batches(X, X_m, kernel: KernelSpec, plan: BatchPlan, budget: MemoryBudget,
                          ledger: TransferLedger | None, fn, *, m_vecs=None, n_vecs=None,
                          want_m=True, n_out=None, cfg: StreamConfig = DEFAULT_STREAM):
    """Stream ``k(X_b, X_m)`` over row batches and reduce ``fn``'s outputs.

    ``fn(K_b, mv, nv, arena)`` sees the kernel block of a batch (in scratch),
    the scratch copies of ``m_vecs`` and of the batch slices of ``n_vecs``, and
    returns ``(m_contribution, batch_output)``; either may be None. Both must
    be allocated from ``arena``. Batch contributions are summed in float64 in
    batch order; batch outputs are written into ``n_out``.
    """
    X = as_matrix(X)
    X_m = as_matrix(X_m)
    n, d = X.shape
    m = X_m.shape[0]
    if X_m.shape[1] != d:
        raise DimensionMismatchError(f"dimension mismatch: data has {d} columns, inducing points {X_m.shape[1]}")
    ledger = ledger if ledger is not None else TransferLedger()
    policy = cfg.policy
    work = policy.working
    acc = np.dtype(np.float64) if policy.high else work
    sparse = sp.issparse(X) or sp.issparse(X_m)
    if sparse:
        X = sp.csr_matrix(X)
        X_m = sp.csr_matrix(X_m, dtype=np.float64)
    q, s = plan.q, plan.s
    B = -(-n // q)
    P = budget.workers
    m_vecs = m_vecs or {}
    n_vecs = n_vecs or {}
    gaussian = kernel.kind == "gaussian"
    nm = row_squared_norms(X_m) if gaussian else None
    gemm = get_blas_funcs("gemm", dtype=acc)

    arenas = [ledger.arena(p, budget, work) for p in range(P)]
    persist = []
    for p in range(min(P, B)):
        pm = {k: arenas[p].load(np.asarray(v, dtype=np.float64), "vec") for k, v in m_vecs.items()}
        if gaussian:
            pm["_nm"] = arenas[p].load(nm, "vec")
        persist.append(pm)
    reducer = OrderedReducer(m, B) if want_m else None

    def rows(b):
        return b * q, min(n, (b + 1) * q)

    def load(p, b):
        lo, hi = rows(b)
        arena = arenas[p]
        xb = arena.load(X[lo:hi], "batch", dtype=work)
        nv = {k: arena.load(v[lo:hi], "vec", np.float64) for k, v in n_vecs.items()}
        return xb, nv

    def block(arena, xb, pm):
        qb = xb.shape[0]
        Kb = arena.empty((qb, m), acc, KNM_TAG, order="F")
        if sparse:
            Kb[...] = (sp.csr_matrix(xb, dtype=np.float64) @ X_m.T).toarray()
        else:
            for c0 in range(0, d, s):
                c1 = min(d, c0 + s)
                xc = arena.empty((qb, c1 - c0), acc, "chunk")
                xc[...] = xb[:, c0:c1]
                mc = arena.load(X_m[:, c0:c1], "chunk", dtype=acc)
                out = gemm(1.0, xc.T, mc.T, beta=0.0 if c0 == 0 else 1.0, c=Kb,
                           trans_a=1, trans_b=0, overwrite_c=1)
                if out is not Kb:
                    Kb[...] = out
                arena.free(xc, mc)
        if gaussian:
            nb = arena.empty(qb, np.float64, "vec")
            nb[...] = row_squared_norms(xb)
            _gaussian_from_cross(Kb, nb, pm["_nm"], kernel.gamma)
            arena.free(nb)
        return Kb

    def compute(p, b, data):
        xb, nv = data
        arena = arenas[p]
        Kb = block(arena, xb, persist[p])
        arena.free(xb)
        res = fn(Kb, persist[p], nv, arena)
        arena.free(Kb, *nv.values())
        return res

    def store(p, b, res):
        cm, cn = res
        arena = arenas[p]
        if cm is not None:
            host = np.empty(m, dtype=np.float64)
            arena.store(cm, host, "contrib")
            reducer.add(b, host)
            arena.free(cm)
        if cn is not None:
            lo, hi = rows(b)
            arena.store(cn, n_out[lo:hi], "out")
            arena.free(cn)

    try:
        run_pipeline(B, P, load, compute, store, overlap=cfg.overlap and B > 1, delays=cfg.delays)
    finally:
        for a in arenas:
            a.release_all()
    return reducer.result() if want_m else None


def _matvec(arena, M, v, size):
    out = arena.empty(size, np.float64, "vec")
    np.matmul(M, v, out=out)
    return out


def _squared_fn(Kb, mv, nv, arena):
    u = _matvec(arena, Kb, mv["v"], Kb.shape[0])
    c = _matvec(arena, Kb.T, u, Kb.shape[1])
    arena.free(u)
    return c, None


def _transpose_fn(Kb, mv, nv, arena):
    return _matvec(arena, Kb.T, nv["w"], Kb.shape[1]), None


def _predict_fn(Kb, mv, nv, arena):
    return None, _matvec(arena, Kb, mv["alpha"], Kb.shape[0])


def _check_m(inducing, v, name="v"):
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.shape[0] != inducing.m:
        raise DimensionMismatchError(f"dimension mismatch: {name} has {v.shape[0]} entries for m={inducing.m}")
    return v


def knm_vec_product(data: Dataset, inducing: InducingSet, kernel: KernelSpec, v, plan: BatchPlan,
                    budget: MemoryBudget, ledger: TransferLedger | None = None,
                    cfg: StreamConfig = DEFAULT_STREAM) -> np.ndarray:
    """``K_nm^T (K_nm v)`` accumulated over row batches in float64."""
    v = _check_m(inducing, v)
    return stream_kernel_batches(data.X, inducing.X_m, kernel, plan, budget, ledger, _squared_fn,
                                 m_vecs={"v": v}, cfg=cfg)


def knm_transpose_vec(data: Dataset, inducing: InducingSet, kernel: KernelSpec, w, plan: BatchPlan,
                      budget: MemoryBudget, ledger: TransferLedger | None = None,
                      cfg: StreamConfig = DEFAULT_STREAM) -> np.ndarray:
    """``K_nm^T w`` accumulated over row batches in float64."""
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.shape[0] != data.n:
        raise DimensionMismatchError(f"dimension mismatch: w has {w.shape[0]} entries for n={data.n}")
    return stream_kernel_batches(data.X, inducing.X_m, kernel, plan, budget, ledger, _transpose_fn,
                                 n_vecs={"w": w}, cfg=cfg)


def knm_predict(X, inducing: InducingSet, kernel: KernelSpec, alpha, plan: BatchPlan,
                budget: MemoryBudget, ledger: TransferLedger | None = None,
                cfg: StreamConfig = DEFAULT_STREAM) -> np.ndarray:
    """``K_nm alpha``, one batch of rows at a time."""
    alpha = _check_m(inducing, alpha, "alpha")
    out = np.empty(X.shape[0], dtype=np.float64)
    stream_kernel_batches(X, inducing.X_m, kernel, plan, budget, ledger, _predict_fn,
                          m_vecs={"alpha": alpha}, want_m=False, n_out=out, cfg=cfg)
    return out


def precondition_rhs(prec: PreconditionerBuffer, b) -> np.ndarray:
    """``A^{-T} T^{-T} b``"""
    return apply_prec(prec, apply_prec(prec, b, "T", transpose=True, inverse=True), "A",
                      transpose=True, inverse=True)


def unprecondition(prec: PreconditionerBuffer, beta) -> np.ndarray:
    """``T^{-1} A^{-1} beta``"""
    return apply_prec(prec, apply_prec(prec, beta, "A", inverse=True), "T", inverse=True)


def precondition_coef(prec: PreconditionerBuffer, alpha) -> np.ndarray:
    """``A T alpha`` (inverse of :func:`unprecondition`)."""
    return apply_prec(prec, apply_prec(prec, alpha, "T"), "A")


def linop_apply(prec: PreconditionerBuffer, data: Dataset, inducing: InducingSet, kernel: KernelSpec,
                lam: float, beta, plan: BatchPlan, budget: MemoryBudget,
                ledger: TransferLedger | None = None, cfg: StreamConfig = DEFAULT_STREAM) -> np.ndarray:
    """Preconditioned operator ``A^{-T}[T^{-T} K_nm^T K_nm T^{-1} + lam n I] A^{-1} beta``."""
    v = apply_prec(prec, _check_m(inducing, beta, "beta"), "A", inverse=True)
    u = apply_prec(prec, v, "T", inverse=True)
    c = knm_vec_product(data, inducing, kernel, u, plan, budget, ledger, cfg)
    c = apply_prec(prec, c, "T", transpose=True, inverse=True)
    c += lam * data.n * v
    return apply_prec(prec, c, "A", transpose=True, inverse=True)


# -- conjugate gradient -----------------------------------------------------------

@dataclass(frozen=True)
class CgConfig:
    max_iters: int
    residual_tol: float | None = None
    record_history: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class CgHistory:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    converged: bool = False


def conjugate_gradient(apply, rhs, cfg: CgConfig, x0=None, callback=None):
    """Plain CG on a symmetric positive definite operator.

    Runs ``cfg.max_iters`` iterations, stopping early when the residual norm
    drops to ``residual_tol * |rhs|`` (if set) or vanishes. ``callback(k, x)``
    is called after every iteration. Returns ``(x, history)``.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    if x0 is None:
        x = np.zeros_like(rhs)
        r = rhs.copy()
    else:
        x = np.array(x0, dtype=np.float64, copy=True)
        r = rhs - apply(x)
    hist = CgHistory()
    bnorm = float(np.linalg.norm(rhs))
    rs = float(r @ r)
    if cfg.record_history:
        hist.residuals.append(math.sqrt(rs))
    tol = None if cfg.residual_tol is None else cfg.residual_tol * bnorm
    if rs == 0.0 or (tol is not None and math.sqrt(rs) <= tol):
        hist.converged = True
        return x, hist
    p = r.copy()
    for k in range(1, cfg.max_iters + 1):
        Ap = apply(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp):
            raise DivergenceError(k)
        if pAp <= 0:
            break
        a = rs / pAp
        x += a * p
        r -= a * Ap
        rs_new = float(r @ r)
        if not (np.isfinite(rs_new) and np.all(np.isfinite(x))):
            raise DivergenceError(k)
        hist.iterations = k
        if cfg.record_history:
            hist.residuals.append(math.sqrt(rs_new))
        if callback is not None:
            callback(k, x)
        if rs_new == 0.0 or (tol is not None and math.sqrt(rs_new) <= tol):
            hist.converged = True
            break
        p *= rs_new / rs
        p += r
        rs = rs_new
    return x, hist


# -- model ----------------------------------------------------------------------

@dataclass
class FalkonModel:
    inducing: InducingSet
    alpha: np.ndarray
    kernel: KernelSpec
    lam: float
    t: int | None = None
    seed: int | None = None
    policy: PrecisionPolicy = DEFAULT_POLICY
    timings: dict = field(default_factory=dict)
    history: CgHistory | None = None
    trace: object = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if not np.all(np.isfinite(self.alpha)):
            raise ValueError("model coefficients must be finite")

    @property
    def d(self) -> int:
        return self.inducing.X_m.shape[1]

    @property
    def m(self) -> int:
        return self.inducing.m


def falkon_fit(data: Dataset, kernel: KernelSpec, lam: float, m: int, t: int, seed=None,
               budget: MemoryBudget = DEFAULT_BUDGET, *, ledger: TransferLedger | None = None,
               policy: PrecisionPolicy = DEFAULT_POLICY, plan: BatchPlan | None = None,
               cg_tol: float | None = None, record_history: bool = False,
               inducing: InducingSet | None = None, cfg: StreamConfig | None = None,
               callback=None) -> FalkonModel:
    """Fit a Nystrom KRR model with ``t`` preconditioned CG iterations."""
    if data.y is None:
        raise ValueError("training data needs targets")
    ledger = ledger if ledger is not None else TransferLedger()
    cfg = cfg or StreamConfig(policy=policy)
    timings = {}
    t0 = time.perf_counter()
    inducing = inducing or subsample_inducing(data, m, seed)
    prec = build_preconditioner(inducing.X_m, kernel, lam, data.n, budget, ledger=ledger, policy=policy)
    timings["preconditioner"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    plan = plan or plan_for_budget(data.n, inducing.m, data.d, budget, policy, data.X)
    rhs = precondition_rhs(prec, knm_transpose_vec(data, inducing, kernel, data.y, plan, budget, ledger, cfg))

    def op(beta):
        return linop_apply(prec, data, inducing, kernel, lam, beta, plan, budget, ledger, cfg)

    beta, hist = conjugate_gradient(op, rhs, CgConfig(t, cg_tol, record_history), callback=callback)
    alpha = unprecondition(prec, beta)
    timings["iterations"] = time.perf_counter() - t0
    return FalkonModel(inducing, alpha, kernel, float(lam), t, seed, policy, timings, hist)


def predict(model: FalkonModel, X_new, budget: MemoryBudget = DEFAULT_BUDGET, *,
            ledger: TransferLedger | None = None, fused: bool | None = None,
            cfg: StreamConfig | None = None) -> np.ndarray:
    """``k(X_new, X_m) alpha``; thin dense data takes the fused path."""
    X_new = as_matrix(X_new)
    if X_new.shape[1] != model.d:
        raise DimensionMismatchError(f"dimension mismatch: model has d={model.d}, input has {X_new.shape[1]}")
    if X_new.shape[0] == 0:
        return np.zeros(0)
    if fused is None:
        fused = model.kernel.kind == "gaussian" and fused_eligible(X_new, model.inducing.X_m)
    if fused:
        return kernel_vecmul_fused(model.kernel, X_new, model.inducing.X_m, model.alpha,
                                   PrecisionPolicy(np.float64)).astype(np.float64)
    cfg = cfg or StreamConfig(policy=model.policy)
    plan = plan_for_budget(X_new.shape[0], model.m, model.d, budget, cfg.policy, X_new)
    return knm_predict(X_new, model.inducing, model.kernel, model.alpha, plan, budget, ledger, cfg)
