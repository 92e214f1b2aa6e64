"""Dataset readers/writers, preprocessing and model persistence.

fbin layout (little-endian): ``n`` and ``d`` as uint64, then ``n*d`` float32
row-major features, then ``n`` float32 targets.

Model layout (little-endian): magic ``FLKN``, uint32 version, uint32 kernel
kind, float64 sigma, uint64 d, uint64 m, float64 lambda, ``m*d`` float64
inducing points (row-major), ``m`` float64 coefficients.
"""
from __future__ import annotations

import os
import struct

import numpy as np
import scipy.sparse as sp
from sklearn.datasets import load_svmlight_file

from .errors import DataFormatError, InvalidLabelError
from .kernels import KernelSpec
from .solver import Dataset, FalkonModel, InducingSet

FORMATS = ("csv", "fbin", "libsvm")

MAGIC = b"FLKN"
VERSION = 1
_KINDS = {"gaussian": 0, "linear": 1}
_HEADER = struct.Struct("<4sIIdQQd")
_FBIN_HEADER = struct.Struct("<QQ")


def canonical_binary_labels(y) -> np.ndarray:
    """Map {0, 1} or {-1, +1} labels to {-1, +1}."""
    y = np.asarray(y, dtype=np.float64)
    vals = set(np.unique(y).tolist())
    if vals <= {-1.0, 1.0}:
        return y
    if vals <= {0.0, 1.0}:
        return np.where(y > 0, 1.0, -1.0)
    raise InvalidLabelError(f"binary targets must be in {{0,1}} or {{-1,+1}}, found {sorted(vals)[:5]}")


def guess_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    return {".csv": "csv", ".fbin": "fbin", ".bin": "fbin", ".svm": "libsvm", ".libsvm": "libsvm"}.get(ext, "csv")


def _load_csv(path):
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64, comments="#")
    except ValueError as exc:
        raise DataFormatError(f"malformed CSV {path}: {exc}") from None
    if arr.shape[1] < 2:
        raise DataFormatError("CSV needs at least one feature column and a target column")
    if not np.all(np.isfinite(arr)):
        raise DataFormatError("CSV contains non-finite values")
    return arr[:, :-1], arr[:, -1]


def _load_fbin(path):
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(_FBIN_HEADER.size)
        if len(head) != _FBIN_HEADER.size:
            raise DataFormatError("truncated fbin header")
        n, d = _FBIN_HEADER.unpack(head)
        if n > 2**40 or d > 2**32 or n * d > 2**50:
            raise DataFormatError(f"fbin header overflows: n={n}, d={d}")
        expect = _FBIN_HEADER.size + 4 * (n * d + n)
        if size != expect:
            raise DataFormatError(f"fbin size {size} does not match header (n={n}, d={d}, expected {expect})")
        X = np.fromfile(fh, dtype="<f4", count=n * d).reshape(n, d)
        y = np.fromfile(fh, dtype="<f4", count=n)
    return X.astype(np.float32), y.astype(np.float64)


def _load_libsvm(path, n_features=None):
    try:
        X, y = load_svmlight_file(str(path), n_features=n_features, zero_based=False, dtype=np.float64)
    except ValueError as exc:
        raise DataFormatError(f"malformed libsvm file {path}: {exc}") from None
    X = sp.csr_matrix(X)
    X.sort_indices()
    return X, np.asarray(y, dtype=np.float64)


def load_dataset(path, format: str | None = None, *, binary: bool = False, n_features: int | None = None) -> Dataset:
    """Read a dataset; libsvm gives CSR features, the others dense.

    Column indices in libsvm files are 1-based on disk and 0-based in
    memory. With ``binary`` the targets are canonicalized to {-1, +1}.
    """
    format = format or guess_format(path)
    if format == "csv":
        X, y = _load_csv(path)
    elif format == "fbin":
        X, y = _load_fbin(path)
    elif format == "libsvm":
        X, y = _load_libsvm(path, n_features)
    else:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    if binary:
        y = canonical_binary_labels(y)
    return Dataset(X, y)


def save_fbin(path, data: Dataset):
    X = data.X.toarray() if sp.issparse(data.X) else data.X
    y = data.y if data.y is not None else np.zeros(data.n)
    with open(path, "wb") as fh:
        fh.write(_FBIN_HEADER.pack(data.n, data.d))
        fh.write(np.ascontiguousarray(X, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(y, dtype="<f4").tobytes())


def save_csv(path, data: Dataset):
    X = data.X.toarray() if sp.issparse(data.X) else data.X
    np.savetxt(path, np.column_stack([X, data.y]), delimiter=",", fmt="%.17g")


def standardize(data: Dataset):
    """Zero-mean, unit (population) std columns. Sparse data passes through.

    Constant columns become 0 and their std is recorded as 1.
    Returns ``(data, means, stds)``.
    """
    if data.sparse:
        return data, np.zeros(data.d), np.ones(data.d)
    X = np.asarray(data.X, dtype=np.float64)
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    stds[stds == 0] = 1.0
    return Dataset((X - means) / stds, data.y), means, stds


def train_test_split(data: Dataset, test_fraction: float, seed=None):
    """Random disjoint split; ``round(n * test_fraction)`` rows go to test."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(data.n)
    n_test = int(round(data.n * test_fraction))
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return data.subset(train_idx), data.subset(test_idx)


def save_model(path, model: FalkonModel):
    X_m = model.inducing.X_m
    X_m = X_m.toarray() if sp.issparse(X_m) else np.asarray(X_m)
    m, d = X_m.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, _KINDS[model.kernel.kind], float(model.kernel.sigma),
                              d, m, float(model.lam)))
        fh.write(np.ascontiguousarray(X_m, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.alpha, dtype="<f8").tobytes())


def load_model(path) -> FalkonModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DataFormatError("truncated model file")
    magic, version, kind, sigma, d, m, lam = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataFormatError("not a model file (bad magic)")
    if version != VERSION:
        raise DataFormatError(f"unsupported model format version {version}")
    names = {v: k for k, v in _KINDS.items()}
    if kind not in names:
        raise DataFormatError(f"unknown kernel code {kind}")
    expect = _HEADER.size + 8 * (m * d + m)
    if len(raw) != expect:
        raise DataFormatError(f"model file size {len(raw)} does not match header (expected {expect})")
    off = _HEADER.size
    X_m = np.frombuffer(raw, dtype="<f8", count=m * d, offset=off).reshape(m, d).astype(np.float64)
    alpha = np.frombuffer(raw, dtype="<f8", count=m, offset=off + 8 * m * d).astype(np.float64)
    kernel = KernelSpec(names[kind], sigma)
    return FalkonModel(InducingSet(X_m), alpha, kernel, lam)
