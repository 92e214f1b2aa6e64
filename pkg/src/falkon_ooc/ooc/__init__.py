"""Tiled out-of-core linear algebra."""
from .cholesky import expected_counts, ooc_cholesky_inplace
from .lauum import ooc_lauum_inplace, ooc_lauum_outofplace
from .layout import TileLayout, WorkTable, plan_tiles
from .trsm import host_triangular_matmul, host_triangular_solve

__all__ = [
    "TileLayout", "WorkTable", "plan_tiles", "expected_counts", "ooc_cholesky_inplace",
    "ooc_lauum_inplace", "ooc_lauum_outofplace", "host_triangular_solve", "host_triangular_matmul",
]
