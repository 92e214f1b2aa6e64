"""Nystrom preconditioner stored in a single m x m host buffer.

With ``K_mm = T^T T`` (T upper triangular) and
``A^T A = (1/m) T T^T + lam I``, the buffer holds T in its upper triangle
and ``A^T`` in its lower triangle. The two factors share the main diagonal,
so both diagonals are also kept as separate vectors.

Build sequence:
    (a) allocate the buffer,
    (b) fill its upper triangle with K_mm tile by tile,
    (c) Cholesky of the upper triangle in place, giving T,
    (d) out-of-place LAUUM of T into the lower triangle, scaled by 1/m and
        shifted by lam,
    (e) Cholesky of the lower triangle in place, giving A^T.

A failed factorization is retried with a diagonal jitter of
``1e-8 * trace / m`` (times 10 per retry, three retries); no second m x m
buffer is ever allocated.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import LossContractError, NotPositiveDefiniteError
from .kernels import DEFAULT_POLICY, KernelSpec, PrecisionPolicy, as_matrix, eval_kernel_block
from .memory import MemoryBudget, TransferLedger
from .ooc.cholesky import ooc_cholesky_inplace
from .ooc.lauum import ooc_lauum_outofplace
from .ooc.layout import TileLayout, plan_tiles
from .ooc.primitives import tri_mask
from .ooc.trsm import host_triangular_matmul, host_triangular_solve

log = logging.getLogger(__name__)

PREC_TAG = "prec"
JITTER_BASE = 1e-8
JITTER_RETRIES = 3


@dataclass
class PreconditionerBuffer:
    buf: np.ndarray
    diag_T: np.ndarray
    diag_A: np.ndarray
    m: int
    n: int
    lam: float
    layout: TileLayout
    budget: MemoryBudget
    ledger: TransferLedger
    jitter: dict = field(default_factory=dict)

    def T_upper(self) -> np.ndarray:
        """Dense copy of T (for tests and small problems)."""
        T = np.triu(self.buf, 1).astype(np.float64)
        T[np.diag_indices(self.m)] = self.diag_T
        return T

    def A_upper(self) -> np.ndarray:
        A = np.triu(self.buf.T, 1).astype(np.float64)
        A[np.diag_indices(self.m)] = self.diag_A
        return A


def _fill_kmm(buf, X_m, kernel, layout, budget, ledger, policy, jitter=0.0):
    """Write K_mm (+ jitter I) into the upper triangle of ``buf`` tile by tile."""
    arena = ledger.arena(0, budget, buf.dtype)
    sl = layout.sl
    for i in range(layout.N):
        for j in range(i, layout.N):
            blk = arena.empty((layout.size(i), layout.size(j)), buf.dtype, "kmm")
            eval_kernel_block(kernel, X_m[sl(i)], X_m[sl(j)], policy, out=blk)
            mask = None
            if i == j:
                if jitter:
                    blk[np.diag_indices(blk.shape[0])] += jitter
                mask = tri_mask(*blk.shape, lower=False)
            arena.store(blk, buf[sl(i), sl(j)], "kmm", mask=mask)
            arena.free(blk)


def _kernel_matvec_blocked(kernel, X_m, v, layout, budget, ledger, policy):
    """K_mm @ v computed one block row at a time in scratch."""
    arena = ledger.arena(0, budget, policy.working)
    out = np.empty(X_m.shape[0], dtype=np.float64)
    for i in range(layout.N):
        sl = layout.sl(i)
        blk = arena.empty((layout.size(i), X_m.shape[0]), policy.working, "kmm")
        eval_kernel_block(kernel, X_m[sl], X_m, policy, out=blk)
        out[sl] = blk @ v
        arena.free(blk)
    return out


def _build(X_m, kernel, lam, n, budget, ledger, policy, weights, timeout):
    X_m = as_matrix(X_m)
    m = X_m.shape[0]
    if m < 1:
        raise ValueError("need at least one inducing point")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    ledger = ledger if ledger is not None else TransferLedger()
    layout = plan_tiles(m, budget)
    dt = policy.working
    # (a)
    buf = ledger.host_empty(PREC_TAG, (m, m), dt)
    jitter = {}

    # (b) + (c), with jitter retries
    trace_k = None
    for attempt in range(JITTER_RETRIES + 1):
        eps = 0.0 if attempt == 0 else JITTER_BASE * 10 ** (attempt - 1) * trace_k / m
        _fill_kmm(buf, X_m, kernel, layout, budget, ledger, policy, eps)
        if trace_k is None:
            trace_k = float(np.trace(buf, dtype=np.float64))
        try:
            ooc_cholesky_inplace(buf.T, layout, budget, ledger, timeout=timeout)
            break
        except NotPositiveDefiniteError as exc:
            if attempt == JITTER_RETRIES:
                raise NotPositiveDefiniteError(exc.block_column, "K_mm is not positive definite "
                                               f"even after jitter (block column {exc.block_column})") from exc
            log.info("K_mm factorization failed at block column %d, retrying with jitter", exc.block_column)
    jitter["T"] = eps
    diag_T = np.diagonal(buf).astype(np.float64)

    # (d) + (e)
    trace_m = None
    for attempt in range(JITTER_RETRIES + 1):
        eps = 0.0 if attempt == 0 else JITTER_BASE * 10 ** (attempt - 1) * trace_m / m
        ooc_lauum_outofplace(buf, buf.T, layout, budget, ledger, diag=diag_T,
                             col_weights=weights, scale=1.0 / m, shift=lam + eps)
        if trace_m is None:
            trace_m = float(np.trace(buf, dtype=np.float64))
        try:
            ooc_cholesky_inplace(buf, layout, budget, ledger, timeout=timeout)
            break
        except NotPositiveDefiniteError as exc:
            if attempt == JITTER_RETRIES:
                raise NotPositiveDefiniteError(exc.block_column, "preconditioner matrix is not positive "
                                               f"definite even after jitter (block column {exc.block_column})") from exc
            log.info("A factorization failed at block column %d, retrying with jitter", exc.block_column)
    jitter["A"] = eps
    diag_A = np.diagonal(buf).astype(np.float64)
    return PreconditionerBuffer(buf, diag_T, diag_A, m, n, float(lam), layout, budget, ledger, jitter)


def build_preconditioner(X_m, kernel: KernelSpec, lam: float, n: int, budget: MemoryBudget, *,
                         ledger: TransferLedger | None = None, policy: PrecisionPolicy = DEFAULT_POLICY,
                         timeout: float = 60.0) -> PreconditionerBuffer:
    """Factor ``K_mm = T^T T`` and ``(1/m) T T^T + lam I = A^T A`` in one buffer."""
    return _build(X_m, kernel, lam, n, budget, ledger, policy, None, timeout)


def build_weighted_preconditioner(X_m, y_m, alpha0, loss, mu: float, kernel: KernelSpec,
                                  budget: MemoryBudget, *, n: int | None = None,
                                  ledger: TransferLedger | None = None,
                                  policy: PrecisionPolicy = DEFAULT_POLICY,
                                  timeout: float = 60.0) -> PreconditionerBuffer:
    """Curvature-weighted variant: ``A^T A = (1/m) T D T^T + mu I``.

    ``D = diag(loss.d2(z, y_m))`` with ``z = K_mm alpha0`` (predictions on the
    inducing points). D enters as a column scaling of T inside the LAUUM.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    X_m = as_matrix(X_m)
    m = X_m.shape[0]
    alpha0 = np.asarray(alpha0, dtype=np.float64)
    y_m = np.asarray(y_m, dtype=np.float64)
    if alpha0.shape != (m,) or y_m.shape != (m,):
        raise ValueError("dimension mismatch: alpha0 and y_m must have one entry per inducing point")
    ledger = ledger if ledger is not None else TransferLedger()
    layout = plan_tiles(m, budget)
    if np.any(alpha0):
        z = _kernel_matvec_blocked(kernel, X_m, alpha0, layout, budget, ledger, policy)
    else:
        z = np.zeros(m)
    D = np.asarray(loss.d2(z, y_m), dtype=np.float64)
    if np.any(D < 0) or not np.all(np.isfinite(D)):
        raise LossContractError("second derivative of the loss must be finite and non-negative")
    return _build(X_m, kernel, mu, n if n is not None else m, budget, ledger, policy, D, timeout)


_WHICH = ("T", "A")


def apply_prec(prec: PreconditionerBuffer, v, which: str, transpose: bool = False,
               inverse: bool = False) -> np.ndarray:
    """Apply ``T``, ``A``, their transposes or inverses to a vector (or columns).

    ``which='T'`` uses the upper triangle of the buffer with ``diag_T``;
    ``which='A'`` uses the lower triangle (read as A through the transpose
    view) with ``diag_A``.
    """
    if which not in _WHICH:
        raise ValueError(f"which must be one of {_WHICH}")
    out = np.array(v, dtype=np.float64, copy=True)
    if out.shape[0] != prec.m:
        raise ValueError(f"dimension mismatch: vector of length {out.shape[0]} for m={prec.m}")
    if which == "T":
        tri, diag = prec.buf, prec.diag_T
    else:
        tri, diag = prec.buf.T, prec.diag_A
    op = host_triangular_solve if inverse else host_triangular_matmul
    op(tri, out, lower=False, trans=transpose, budget=prec.budget, ledger=prec.ledger, diag=diag,
       tile=prec.layout.t)
    return out
