"""Kernel block evaluation for dense and CSR inputs.

Gaussian blocks are formed through the norm expansion
``|x|^2 - 2 x.x' + |x'|^2``. Under the default precision policy the whole
expansion (norms and cross products) is carried out in 64-bit and only the
final kernel values are cast to the working precision; the naive 32-bit path
is kept for diagnostics because it loses positive definiteness on data with
large offsets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import backend
from .errors import DimensionMismatchError

THIN_DATA_THRESHOLD = 32

KERNEL_KINDS = ("gaussian", "linear")


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "gaussian"
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ValueError("gaussian kernel needs sigma > 0")

    @property
    def gamma(self) -> float:
        return 0.5 / (self.sigma * self.sigma)

    @classmethod
    def gaussian(cls, sigma: float) -> "KernelSpec":
        return cls("gaussian", float(sigma))

    @classmethod
    def linear(cls) -> "KernelSpec":
        return cls("linear", 1.0)


@dataclass(frozen=True)
class PrecisionPolicy:
    working: np.dtype = np.dtype(np.float64)
    accumulate_norms_high: bool = True

    def __post_init__(self):
        dt = np.dtype(self.working)
        if dt not in (np.float32, np.float64):
            raise ValueError("working precision must be float32 or float64")
        object.__setattr__(self, "working", dt)

    @property
    def high(self) -> bool:
        """Whether the norm expansion is summed in 64-bit."""
        return self.working == np.float64 or self.accumulate_norms_high

    @property
    def eps(self) -> float:
        return float(np.finfo(self.working).eps) / 2

    @classmethod
    def for_bits(cls, bits: int) -> "PrecisionPolicy":
        if bits not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        return cls(np.dtype(np.float32 if bits == 32 else np.float64))


DEFAULT_POLICY = PrecisionPolicy()


def as_matrix(X):
    """Validate a design matrix: 2-D ndarray or CSR with sorted indices."""
    if sp.issparse(X):
        X = sp.csr_matrix(X)
        if not X.has_sorted_indices:
            X = X.sorted_indices()
        return X
    X = np.asarray(X)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float64)
    return X


def _check_cols(X1, X2):
    if X1.shape[1] != X2.shape[1]:
        raise DimensionMismatchError(
            f"dimension mismatch: {X1.shape[1]} vs {X2.shape[1]} columns")


def row_squared_norms(X) -> np.ndarray:
    """Squared row norms, always accumulated in 64-bit."""
    if sp.issparse(X):
        X = sp.csr_matrix(X, dtype=np.float64)
        return np.asarray(X.multiply(X).sum(axis=1), dtype=np.float64).ravel()
    X = np.asarray(X, dtype=np.float64)
    return np.einsum("ij,ij->i", X, X)


def _gaussian_from_cross(cross, n1, n2, gamma):
    """In-place: cross <- exp(-gamma * max(n1 + n2 - 2 cross, 0))."""
    cross *= -2.0
    cross += n1[:, None]
    cross += n2[None, :]
    np.maximum(cross, 0.0, out=cross)
    cross *= -gamma
    np.exp(cross, out=cross)
    return cross


def eval_kernel_block(kernel: KernelSpec, X1, X2, policy: PrecisionPolicy = DEFAULT_POLICY,
                      out: np.ndarray | None = None) -> np.ndarray:
    """Dense ``k(X1, X2)`` in the policy's working precision.

    Sparse operands are routed to :func:`kernel_block_sparse`. If ``out`` is
    given the result is written there and returned.
    """
    if sp.issparse(X1) or sp.issparse(X2):
        res = kernel_block_sparse(kernel, X1, X2, policy)
        if out is not None:
            out[...] = res
            return out
        return res
    X1 = as_matrix(X1)
    X2 = as_matrix(X2)
    _check_cols(X1, X2)
    if policy.high:
        a = X1.astype(np.float64, copy=False)
        b = X2.astype(np.float64, copy=False)
        block = a @ b.T
        if kernel.kind == "gaussian":
            _gaussian_from_cross(block, row_squared_norms(a), row_squared_norms(b), kernel.gamma)
    else:
        # naive low-precision path: norms, cross term and sum all in 32-bit
        a = X1.astype(np.float32, copy=False)
        b = X2.astype(np.float32, copy=False)
        block = a @ b.T
        if kernel.kind == "gaussian":
            n1 = np.einsum("ij,ij->i", a, a)
            n2 = np.einsum("ij,ij->i", b, b)
            _gaussian_from_cross(block, n1, n2, np.float32(kernel.gamma))
    if out is not None:
        out[...] = block
        return out
    return block.astype(policy.working, copy=False)


def kernel_block_sparse(kernel: KernelSpec, X1, X2, policy: PrecisionPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Kernel block between CSR operands; the output is always dense.

    Inner products come from a sparse-sparse product (row dot products), and
    the expansion is summed in 64-bit.
    """
    X1 = sp.csr_matrix(X1, dtype=np.float64)
    X2 = sp.csr_matrix(X2, dtype=np.float64)
    _check_cols(X1, X2)
    block = (X1 @ X2.T).toarray()
    if kernel.kind == "gaussian":
        _gaussian_from_cross(block, row_squared_norms(X1), row_squared_norms(X2), kernel.gamma)
    return block.astype(policy.working, copy=False)


def fused_eligible(X1, X2, threshold: int = THIN_DATA_THRESHOLD) -> bool:
    return not (sp.issparse(X1) or sp.issparse(X2)) and X1.shape[1] <= threshold


def kernel_vecmul_fused(kernel: KernelSpec, X1, X2, v, policy: PrecisionPolicy = DEFAULT_POLICY,
                        *, threshold: int = THIN_DATA_THRESHOLD, impl=None) -> np.ndarray:
    """``k(X1, X2) @ v`` without materializing the kernel block.

    Only for dense inputs with at most ``threshold`` features. Accumulation is
    64-bit; the result is cast to the working precision.
    """
    if sp.issparse(X1) or sp.issparse(X2):
        raise TypeError("fused path takes dense inputs only")
    X1 = as_matrix(X1)
    X2 = as_matrix(X2)
    _check_cols(X1, X2)
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.shape[0] != X2.shape[0]:
        raise DimensionMismatchError(f"dimension mismatch: vector of length {v.shape[0]} for {X2.shape[0]} columns")
    d = X1.shape[1]
    if d > threshold:
        raise ValueError(f"fused path requires d <= {threshold}, got {d}")
    q, r = X1.shape[0], X2.shape[0]
    out = np.zeros(q, dtype=np.float64)
    if q == 0 or r == 0:
        return out.astype(policy.working)
    a = np.ascontiguousarray(X1, dtype=np.float64)
    b = np.ascontiguousarray(X2, dtype=np.float64)
    if kernel.kind == "linear":
        out = a @ (b.T @ v)
    elif d == 0:
        out[:] = v.sum()
    else:
        impl = impl or backend.fused
        impl.gaussian_matvec(a, np.ascontiguousarray(b.T), row_squared_norms(a),
                             row_squared_norms(b), v, kernel.gamma, out)
    return out.astype(policy.working, copy=False)
