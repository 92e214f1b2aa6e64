"""Out-of-core LAUUM: the upper triangle of ``U @ U.T`` for upper-triangular U.

Tile ``(i, j)`` (``j >= i``) of the result is ``sum_{k >= j} U_ik U_jk^T``.
Block rows are processed in ascending order. For row ``i`` each worker
computes the result tiles of the columns it owns: it loads ``U_ik`` for every
``k`` from its first owned column onward into scratch, then streams the tiles
of row ``j`` one at a time. Columns are handled in ascending order so each
result can overwrite its own slot of the loaded row. The diagonal tile uses
the in-core lauum plus rank-k updates; off-diagonal tiles use a triangular
multiply plus general multiplies.

In the in-place variant all workers meet at a barrier once they hold their
copy of row ``i`` and only then write it back, so no one reads a partially
updated row. The out-of-place variant needs no rendezvous.

Optional extras used by the preconditioner: a diagonal override (the true
diagonal of U when the buffer's diagonal holds something else), per-column
weights ``w`` (computing ``U diag(w) U^T``), an output ``scale`` and a
diagonal ``shift``.
"""
from __future__ import annotations

import threading

import numpy as np

from ..errors import AliasingError, BudgetError, WorkerAborted
from ..memory import MemoryBudget, TransferLedger
from . import primitives as prim
from .layout import TileLayout, run_workers


def _is_transpose_view(a, b) -> bool:
    ai, bi = a.__array_interface__, b.__array_interface__
    return ai["data"][0] == bi["data"][0] and a.shape == b.shape[::-1] and a.strides == b.strides[::-1]


def _lauum(U, out, layout, budget, ledger, *, barrier, diag, col_weights, scale, shift):
    n = layout.n
    if U.shape != (n, n) or out.shape != (n, n):
        raise ValueError(f"dimension mismatch: matrix {U.shape} vs layout n={n}")
    ledger = ledger if ledger is not None else TransferLedger()
    t, N, P = layout.t, layout.N, layout.workers
    if (N + 1) * t * t > budget.G:
        raise BudgetError(f"tile side {t} needs {(N + 1) * t * t} scratch elements, G={budget.G}")
    sl, size = layout.sl, layout.size
    sqrt_w = None if col_weights is None else np.sqrt(np.asarray(col_weights, dtype=np.float64))
    bar = threading.Barrier(P) if barrier and P > 1 else None

    def load(arena, i, k):
        tile = arena.load(U[sl(i), sl(k)], "tile")
        if i == k:
            tile[~prim.tri_mask(*tile.shape, lower=False)] = 0
            if diag is not None:
                np.fill_diagonal(tile, diag[sl(i)])
        if sqrt_w is not None:
            tile *= sqrt_w[sl(k)]
        return tile

    def worker(p):
        arena = ledger.arena(p, budget, U.dtype)
        for i in range(N):
            mine = [j for j in range(i, N) if layout.owner(j) == p]
            first = mine[0] if mine else N
            row = {k: load(arena, i, k) for k in range(first, N)}
            if bar is not None:
                try:
                    bar.wait()
                except threading.BrokenBarrierError:
                    raise WorkerAborted("lauum aborted by a failing peer") from None
            for j in mine:
                C = row[j]
                if j == i:
                    prim.lauum_upper(C)
                    for k in range(i + 1, N):
                        prim.gemm_nt_add(row[k], row[k], C)
                else:
                    D = load(arena, j, j)
                    prim.trmm_right_upper_t(D, C)
                    arena.free(D)
                    for k in range(j + 1, N):
                        D = load(arena, j, k)
                        prim.gemm_nt_add(row[k], D, C)
                        arena.free(D)
            # every result tile is complete; scale, shift and write back
            for j in mine:
                C = row[j]
                if scale != 1.0:
                    C *= scale
                mask = None
                if j == i:
                    if shift:
                        C[np.diag_indices(size(i))] += shift
                    mask = prim.tri_mask(*C.shape, lower=False)
                arena.store(C, out[sl(i), sl(j)], mask=mask)
            arena.free(*row.values())

    run_workers(worker, P, on_error=(bar.abort if bar is not None else None))


def ooc_lauum_inplace(U: np.ndarray, layout: TileLayout, budget: MemoryBudget,
                      ledger: TransferLedger | None = None, *, col_weights=None,
                      scale: float = 1.0, shift: float = 0.0):
    """Overwrite the upper triangle of ``U`` with that of ``U @ U.T``.

    The strict lower triangle is left untouched.
    """
    _lauum(U, U, layout, budget, ledger, barrier=True, diag=None,
           col_weights=col_weights, scale=scale, shift=shift)


def ooc_lauum_outofplace(U: np.ndarray, out: np.ndarray, layout: TileLayout, budget: MemoryBudget,
                         ledger: TransferLedger | None = None, *, diag=None, col_weights=None,
                         scale: float = 1.0, shift: float = 0.0):
    """Write the upper triangle of ``scale * U diag(w) U^T + shift I`` into ``out``.

    ``out`` must not overlap ``U``, with one exception: ``out`` may be exactly
    ``U.T`` (the other triangle of the same buffer) when ``diag`` supplies the
    diagonal of U, since the shared diagonal is overwritten.
    """
    if np.may_share_memory(U, out):
        if not (diag is not None and _is_transpose_view(U, out)):
            raise AliasingError("out overlaps U; pass a distinct buffer (or U.T with a diagonal override)")
    _lauum(U, out, layout, budget, ledger, barrier=False, diag=diag,
           col_weights=col_weights, scale=scale, shift=shift)
