"""Out-of-core, in-place tiled Cholesky of a host matrix's lower triangle.

Block rows are owned 1D block-cyclically. For each block column ``i`` the
owner of row ``i`` factorizes the diagonal tile, every owner of a row
``j > i`` solves its sub-diagonal tile against it and then applies the
trailing update ``A_jy -= L_ji L_yi^T`` to the rest of its row. A tile
``(j, y)`` is read for column ``i`` only once it has received exactly ``i``
updates, tracked in a :class:`WorkTable`; after completion the counter of
tile ``(j, y)`` is ``y + 1``.

At most three tiles sit in a worker's scratch at a time (plus an optional
cache of ``lookahead`` sub-diagonal tiles of the current column).
"""
from __future__ import annotations

import numpy as np

from ..errors import BudgetError, NotPositiveDefiniteError
from ..memory import MemoryBudget, TransferLedger
from . import primitives as prim
from .layout import TileLayout, WorkTable, run_workers


def expected_counts(N: int) -> np.ndarray:
    """Final work-table counters: tile (j, y) with y <= j ends at y + 1."""
    out = np.zeros((N, N), dtype=np.int64)
    for j in range(N):
        out[j, : j + 1] = np.arange(1, j + 2)
    return out


def ooc_cholesky_inplace(A: np.ndarray, layout: TileLayout, budget: MemoryBudget,
                         ledger: TransferLedger | None = None, *, timeout: float = 60.0,
                         lookahead: int = 0, table: WorkTable | None = None) -> WorkTable:
    """Overwrite the lower triangle of ``A`` with its Cholesky factor.

    ``A`` may be any 2-D view (e.g. ``buf.T`` to factor the upper triangle of
    ``buf``). The strict upper triangle is never written. Raises
    :class:`NotPositiveDefiniteError` with the failing block column.
    Returns the work table for inspection.
    """
    n = layout.n
    if A.shape != (n, n):
        raise ValueError(f"dimension mismatch: matrix {A.shape} vs layout n={n}")
    ledger = ledger if ledger is not None else TransferLedger()
    t, N, P = layout.t, layout.N, layout.workers
    # one tile for a single block, two for N=2, three otherwise
    need = (min(N, 3) + lookahead) * t * t
    if need > budget.G:
        raise BudgetError(f"tile side {t} needs {need} scratch elements, G={budget.G}")
    table = table or WorkTable(N, timeout)
    owned = layout.block_allocs
    sl = layout.sl

    def worker(p):
        arena = ledger.arena(p, budget, A.dtype)

        def load(i, j, expected, tag="tile"):
            table.wait(i, j, expected)
            return arena.load(A[sl(i), sl(j)], tag)

        def write(tile, i, j, lower_only=False):
            mask = None
            if lower_only:
                mask = prim.tri_mask(*tile.shape, lower=True)
            arena.store(tile, A[sl(i), sl(j)], mask=mask)
            table.increment(i, j)

        for i in range(N):
            if layout.owner(i) == p:
                B = load(i, i, i)
                try:
                    prim.potrf_lower(B)
                except prim.TileNotPositiveDefinite:
                    raise NotPositiveDefiniteError(i) from None
                write(B, i, i, lower_only=True)
                arena.free(B)
            rows = [j for j in owned[p] if j > i]
            if not rows:
                continue
            cache = {}
            for j in rows:
                B = load(i, i, i + 1)
                C = load(j, i, i)
                prim.trsm_right_lower_t(B, C)
                arena.free(B)
                write(C, j, i)
                # trailing update of row j, reusing the solved tile C
                for y in range(i + 1, j + 1):
                    E = load(j, y, i)
                    if y == j:
                        prim.syrk_sub(C, E)
                        write(E, j, y, lower_only=True)
                    else:
                        D = cache.get(y)
                        if D is None:
                            D = load(y, i, i + 1)
                            if len(cache) < lookahead:
                                cache[y] = D
                        prim.gemm_nt_sub(C, D, E)
                        if cache.get(y) is not D:
                            arena.free(D)
                        write(E, j, y)
                    arena.free(E)
                arena.free(C)
            arena.free(*cache.values())

    run_workers(worker, P, on_error=table.abort)
    return table
