"""In-core tile primitives (reference host backend).

Every scheduling routine calls these on arrays that already live in a
worker's scratch arena. An accelerator backend would swap this module's
functions without touching the schedulers.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import lapack, solve_triangular
from scipy.linalg.blas import get_blas_funcs


class TileNotPositiveDefinite(ArithmeticError):
    pass


def potrf_lower(tile):
    """In-place lower Cholesky of a tile; the strict upper part is zeroed."""
    fn = lapack.get_lapack_funcs("potrf", (tile,))
    c, info = fn(tile, lower=1, clean=1, overwrite_a=1)
    if info > 0:
        raise TileNotPositiveDefinite(info)
    if info < 0:
        raise ValueError(f"potrf: illegal argument {-info}")
    if c is not tile:
        tile[...] = c
    return tile


def trsm_right_lower_t(L, C):
    """C <- C @ L^{-T} for lower-triangular L."""
    C[...] = solve_triangular(L, C.T, lower=True, check_finite=False).T
    return C


def syrk_sub(C, E):
    """E -= C @ C.T (only the lower triangle of E is meaningful afterwards)."""
    E -= C @ C.T
    return E


def gemm_nt_sub(C, D, E):
    """E -= C @ D.T"""
    E -= C @ D.T
    return E


def gemm_nt_add(C, D, E):
    """E += C @ D.T"""
    E += C @ D.T
    return E


def lauum_upper(U):
    """In place: upper triangle of U <- upper triangle of U @ U.T."""
    fn = lapack.get_lapack_funcs("lauum", (U,))
    c, info = fn(U, lower=0, overwrite_c=1)
    if info != 0:
        raise ValueError(f"lauum failed with info={info}")
    if c is not U:
        U[...] = c
    return U


def trmm_right_upper_t(U, C):
    """C <- C @ U.T for upper-triangular U."""
    fn = get_blas_funcs("trmm", (U, C))
    C[...] = fn(1.0, U, C, side=1, lower=0, trans_a=1)
    return C


def tri_solve(T, B, lower, trans=False):
    """B <- op(T)^{-1} B for a small in-scratch triangular tile."""
    B[...] = solve_triangular(T, B, lower=lower, trans=1 if trans else 0, check_finite=False)
    return B


def tri_mask(h, w, lower, offset=0):
    """Boolean mask selecting the lower (or upper) triangle, diagonal included."""
    if lower:
        return np.tri(h, w, offset, dtype=bool)
    return ~np.tri(h, w, offset - 1, dtype=bool)
