"""Triangular solves and products against a host-resident triangular matrix.

The right-hand side is handled in column panels; the triangular operand is
streamed one tile at a time, so scratch holds one panel plus one tile.
Only the named triangle of ``Tri`` is read; ``diag`` optionally replaces its
diagonal (for factors sharing a buffer with another triangle).
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import BudgetError, SingularTriangularError
from ..memory import MemoryBudget, TransferLedger
from . import primitives as prim
from .layout import TileLayout

DEFAULT_TILE = 512
_UNBOUNDED = MemoryBudget(2**62)


def _panel_plan(n, k, G, tile):
    t = min(n, tile)
    while t >= 1:
        kb = min(k, (G - t * t) // n) if G > t * t else 0
        if kb >= 1:
            return t, kb
        t = min(t - 1, math.isqrt(max(G - n, 0)))
    raise BudgetError(f"budget G={G} cannot hold a panel of {n} rows plus a tile")


class _TriSource:
    def __init__(self, Tri, lower, trans, diag, layout, arena):
        self.Tri, self.lower, self.trans = Tri, lower, trans
        self.diag, self.layout, self.arena = diag, layout, arena
        # lower-ness of op(Tri)
        self.eff_lower = lower != trans

    def tile(self, a, b):
        """Block (a, b) of op(Tri), loaded into scratch."""
        sl = self.layout.sl
        i, j = (b, a) if self.trans else (a, b)
        tile = self.arena.load(self.Tri[sl(i), sl(j)], "tile")
        if i == j:
            tile[~prim.tri_mask(*tile.shape, lower=self.lower)] = 0
            if self.diag is not None:
                np.fill_diagonal(tile, self.diag[sl(i)])
        return tile.T if self.trans else tile


def _check_diag(Tri, diag):
    d = np.diagonal(Tri) if diag is None else np.asarray(diag)
    zero = np.flatnonzero(d == 0)
    if zero.size:
        raise SingularTriangularError(int(zero[0]))


def _run(Tri, B, lower, trans, budget, ledger, diag, tile, solve):
    n = Tri.shape[0]
    if Tri.shape != (n, n) or B.shape[0] != n:
        raise ValueError(f"dimension mismatch: triangular {Tri.shape} vs right-hand side {B.shape}")
    if diag is not None and len(diag) != n:
        raise ValueError("dimension mismatch: diagonal override length")
    if solve:
        _check_diag(Tri, diag)
    vec = B.ndim == 1
    B2 = B.reshape(n, 1) if vec else B
    k = B2.shape[1]
    if k == 0:
        return B
    budget = budget or _UNBOUNDED
    ledger = ledger if ledger is not None else TransferLedger()
    t, kb = _panel_plan(n, k, budget.G, tile)
    layout = TileLayout(n, t)
    arena = ledger.arena(0, budget, B.dtype)
    src = _TriSource(Tri, lower, trans, diag, layout, arena)
    N, sl = layout.N, layout.sl
    forward = src.eff_lower if solve else not src.eff_lower
    order = range(N) if forward else range(N - 1, -1, -1)
    for c0 in range(0, k, kb):
        X = arena.load(B2[:, c0:c0 + kb], "panel")
        for a in order:
            Xa = X[sl(a)]
            others = range(a) if src.eff_lower else range(a + 1, N)
            if solve:
                for b in others:
                    M = src.tile(a, b)
                    Xa -= M @ X[sl(b)]
                    arena.free(M.base if src.trans else M)
                M = src.tile(a, a)
                prim.tri_solve(M, Xa, lower=src.eff_lower)
                arena.free(M.base if src.trans else M)
            else:
                M = src.tile(a, a)
                Xa[...] = M @ Xa
                arena.free(M.base if src.trans else M)
                for b in others:
                    M = src.tile(a, b)
                    Xa += M @ X[sl(b)]
                    arena.free(M.base if src.trans else M)
        arena.store(X, B2[:, c0:c0 + kb], "panel")
        arena.free(X)
    return B


def host_triangular_solve(Tri, B, *, lower: bool, trans: bool = False, budget: MemoryBudget | None = None,
                          ledger: TransferLedger | None = None, diag=None, tile: int = DEFAULT_TILE):
    """Overwrite ``B`` with ``op(Tri)^{-1} B``; ``op`` is transpose when ``trans``.

    Raises :class:`SingularTriangularError` on a zero diagonal entry.
    """
    return _run(Tri, B, lower, trans, budget, ledger, diag, tile, solve=True)


def host_triangular_matmul(Tri, B, *, lower: bool, trans: bool = False, budget: MemoryBudget | None = None,
                           ledger: TransferLedger | None = None, diag=None, tile: int = DEFAULT_TILE):
    """Overwrite ``B`` with ``op(Tri) @ B``."""
    return _run(Tri, B, lower, trans, budget, ledger, diag, tile, solve=False)
