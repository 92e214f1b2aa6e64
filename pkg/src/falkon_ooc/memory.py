"""Memory budgets, worker scratch arenas and the transfer ledger.

Workers model accelerators with a small private memory ("scratch") next to a
large host store. Every array a worker touches is allocated from its
:class:`Scratch` arena, which charges the owning :class:`TransferLedger` and
refuses allocations that would exceed the per-worker budget ``G``. Host
buffers that the library itself allocates go through
:meth:`TransferLedger.host_empty` so their shapes can be audited.

Sizes are counted in elements of the *working* precision; a 64-bit temporary
in 32-bit mode costs two elements.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import BudgetError

KNM_TAG = "knm"


@dataclass(frozen=True)
class MemoryBudget:
    """Per-worker scratch capacity ``G`` (elements) and worker count ``P``."""

    scratch_elements_per_worker: int
    workers: int = 1

    def __post_init__(self):
        if self.scratch_elements_per_worker < 1:
            raise BudgetError("scratch budget must be positive")
        if self.workers < 1:
            raise ValueError("need at least one worker")

    @property
    def G(self) -> int:
        return self.scratch_elements_per_worker

    @classmethod
    def from_megabytes(cls, megabytes: float, dtype=np.float64, workers: int = 1) -> "MemoryBudget":
        elements = int(megabytes * 2**20) // np.dtype(dtype).itemsize
        return cls(elements, workers)


@dataclass(frozen=True)
class HostAllocation:
    tag: str
    shape: tuple
    dtype: str

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass
class TransferLedger:
    """Counts host<->scratch traffic, scratch peaks and host allocations."""

    host_to_scratch_elements: int = 0
    scratch_to_host_elements: int = 0
    peak_scratch_per_worker: dict = field(default_factory=dict)
    host_allocations: list = field(default_factory=list)
    max_scratch_alloc_by_tag: dict = field(default_factory=dict)
    host_written_by_tag: dict = field(default_factory=dict)

    def __post_init__(self):
        self._lock = threading.Lock()

    # -- worker side -------------------------------------------------------
    def arena(self, worker: int, budget: MemoryBudget, dtype=np.float64) -> "Scratch":
        return Scratch(self, worker, budget.G, dtype)

    def _peak(self, worker, in_use):
        with self._lock:
            if in_use > self.peak_scratch_per_worker.get(worker, 0):
                self.peak_scratch_per_worker[worker] = in_use

    def _alloc_tag(self, tag, elements):
        with self._lock:
            if elements > self.max_scratch_alloc_by_tag.get(tag, 0):
                self.max_scratch_alloc_by_tag[tag] = elements

    def _transfer(self, to_scratch=0, to_host=0, tag=None):
        with self._lock:
            self.host_to_scratch_elements += to_scratch
            self.scratch_to_host_elements += to_host
            if to_host and tag is not None:
                self.host_written_by_tag[tag] = self.host_written_by_tag.get(tag, 0) + to_host

    # -- host side ---------------------------------------------------------
    def host_empty(self, tag: str, shape, dtype=np.float64) -> np.ndarray:
        shape = tuple(int(s) for s in np.atleast_1d(shape))
        with self._lock:
            self.host_allocations.append(HostAllocation(tag, shape, np.dtype(dtype).name))
        return np.empty(shape, dtype=dtype)

    def host_resident(self, tag: str = KNM_TAG) -> int:
        """Elements with ``tag`` that ever became host resident (allocated or written)."""
        with self._lock:
            allocated = sum(a.size for a in self.host_allocations if a.tag == tag)
            return allocated + self.host_written_by_tag.get(tag, 0)

    def allocations_with_shape(self, shape) -> list:
        shape = tuple(shape)
        return [a for a in self.host_allocations if a.shape == shape]

    def assert_within(self, budget: MemoryBudget):
        for worker, peak in self.peak_scratch_per_worker.items():
            if peak > budget.G:
                raise BudgetError(f"worker {worker} peaked at {peak} > G={budget.G}")


def _nbytes(arr) -> int:
    if sp.issparse(arr):
        return arr.data.nbytes + arr.indices.nbytes + arr.indptr.nbytes
    return arr.nbytes


class Scratch:
    """A worker's private memory arena, charged against a ledger.

    Thread safe: the stages of one worker's pipeline share a single arena.
    """

    def __init__(self, ledger: TransferLedger, worker: int, capacity: int, dtype=np.float64):
        self.ledger = ledger
        self.worker = worker
        self.capacity = int(capacity)
        self.unit = np.dtype(dtype).itemsize
        self.in_use = 0
        self._live = {}
        self._lock = threading.Lock()

    def _elements(self, nbytes: int) -> int:
        return -(-nbytes // self.unit)

    def _charge(self, arr, tag):
        n = self._elements(_nbytes(arr))
        with self._lock:
            if self.in_use + n > self.capacity:
                raise BudgetError(
                    f"worker {self.worker}: allocating {n} elements ({tag}) exceeds "
                    f"scratch budget {self.capacity} ({self.in_use} in use)")
            self.in_use += n
            self._live[id(arr)] = n
            in_use = self.in_use
        self.ledger._peak(self.worker, in_use)
        self.ledger._alloc_tag(tag, n)
        return arr

    def reserve(self, elements: int, tag: str):
        """Check that ``elements`` more would fit, without allocating."""
        if self.in_use + elements > self.capacity:
            raise BudgetError(f"worker {self.worker}: {tag} needs {elements} elements, "
                              f"{self.capacity - self.in_use} available")

    def empty(self, shape, dtype, tag: str = "tmp", order: str = "C") -> np.ndarray:
        dtype = np.dtype(dtype)
        n = self._elements(math.prod(np.atleast_1d(shape)) * dtype.itemsize)
        self.reserve(n, tag)
        return self._charge(np.empty(shape, dtype=dtype, order=order), tag)

    def zeros(self, shape, dtype, tag: str = "tmp", order: str = "C") -> np.ndarray:
        out = self.empty(shape, dtype, tag, order)
        out.fill(0)
        return out

    def load(self, host, tag: str = "tile", dtype=None):
        """Copy a host array (or CSR slice) into scratch; counts as a transfer."""
        if sp.issparse(host):
            n = self._elements(_nbytes(host))
            self.reserve(n, tag)
            arr = host.copy()
            if dtype is not None:
                arr = arr.astype(dtype)
        else:
            dtype = np.dtype(dtype or host.dtype)
            n = self._elements(host.size * dtype.itemsize)
            self.reserve(n, tag)
            arr = np.array(host, dtype=dtype, order="C", copy=True)
        self._charge(arr, tag)
        self.ledger._transfer(to_scratch=arr.nnz if sp.issparse(arr) else arr.size)
        return arr

    def store(self, arr, host_dest, tag: str = "tile", mask=None):
        """Write scratch contents back to a host view (optionally only where ``mask``)."""
        if mask is None:
            host_dest[...] = arr
            count = arr.size
        else:
            np.copyto(host_dest, arr, where=mask, casting="unsafe")
            count = int(np.count_nonzero(mask))
        self.ledger._transfer(to_host=count, tag=tag)

    def free(self, *arrays):
        with self._lock:
            for arr in arrays:
                if arr is None:
                    continue
                n = self._live.pop(id(arr), None)
                if n is None:
                    raise KeyError("array not allocated from this arena")
                self.in_use -= n

    def release_all(self):
        with self._lock:
            self._live.clear()
            self.in_use = 0
