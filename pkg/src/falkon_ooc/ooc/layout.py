"""Tile geometry, block-cyclic ownership and the per-tile work table."""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np

from ..errors import BudgetError, DeadlockError, WorkerAborted
from ..memory import MemoryBudget


@dataclass(frozen=True)
class TileLayout:
    """Square ``n x n`` matrix cut into ``N`` tiles of side ``t`` per dimension.

    Block rows are dealt round-robin to ``workers`` (0-based: row ``i`` goes to
    worker ``i % workers``). The last tile may be smaller than ``t``.
    """

    n: int
    t: int
    workers: int = 1

    def __post_init__(self):
        if self.n < 1 or self.t < 1:
            raise ValueError("n and t must be positive")
        if self.workers < 1:
            raise ValueError("need at least one worker")

    @property
    def N(self) -> int:
        return -(-self.n // self.t)

    @property
    def block_allocs(self) -> tuple:
        return tuple(tuple(range(p, self.N, self.workers)) for p in range(self.workers))

    def owner(self, i: int) -> int:
        return i % self.workers

    def bounds(self, i: int) -> tuple:
        lo = i * self.t
        return lo, min(lo + self.t, self.n)

    def size(self, i: int) -> int:
        lo, hi = self.bounds(i)
        return hi - lo

    def sl(self, i: int) -> slice:
        return slice(*self.bounds(i))

    def with_workers(self, workers: int) -> "TileLayout":
        return TileLayout(self.n, self.t, workers)


def plan_tiles(n: int, budget: MemoryBudget) -> TileLayout:
    """Largest tile side ``t`` with ``(ceil(n/t) + 1) * t**2 <= G``."""
    if n < 1:
        raise ValueError("n must be positive")
    G = budget.G
    # (N+1) t^2 >= t^2 + n t, so no t above this bound can fit
    t = min(n, int(np.sqrt(G)))
    while t >= 1:
        if (-(-n // t) + 1) * t * t <= G:
            return TileLayout(n, t, budget.workers)
        t -= 1
    raise BudgetError(f"scratch budget G={G} cannot hold a single tile column for n={n}")


class WorkTable:
    """Per-tile update counters with blocking waits.

    ``wait(i, j, k)`` blocks until tile ``(i, j)`` has received ``k`` updates.
    If no counter anywhere advances for ``timeout`` seconds the waiter raises
    :class:`DeadlockError`; after :meth:`abort` every waiter raises
    :class:`WorkerAborted`.
    """

    def __init__(self, N: int, timeout: float = 60.0):
        self.counters = np.zeros((N, N), dtype=np.int64)
        self.timeout = timeout
        self._cond = threading.Condition()
        self._last_progress = time.monotonic()
        self._aborted = False

    def get(self, i, j) -> int:
        with self._cond:
            return int(self.counters[i, j])

    def wait(self, i, j, expected):
        with self._cond:
            while self.counters[i, j] < expected:
                if self._aborted:
                    raise WorkerAborted("schedule aborted by a failing peer")
                left = self.timeout - (time.monotonic() - self._last_progress)
                if left <= 0:
                    raise DeadlockError(
                        f"tile ({i},{j}) stuck at {self.counters[i, j]} < {expected} "
                        f"with no progress for {self.timeout}s")
                self._cond.wait(left)

    def increment(self, i, j):
        with self._cond:
            self.counters[i, j] += 1
            self._last_progress = time.monotonic()
            self._cond.notify_all()

    def abort(self):
        with self._cond:
            self._aborted = True
            self._cond.notify_all()

    def snapshot(self) -> np.ndarray:
        with self._cond:
            return self.counters.copy()


def run_workers(fn, workers: int, on_error=None):
    """Run ``fn(p)`` for each worker; re-raise the first real failure.

    A single worker runs on the calling thread. ``on_error`` is invoked once
    when a worker fails so peers can be released.
    """
    if workers == 1:
        fn(0)
        return
    errors = []
    lock = threading.Lock()

    def target(p):
        try:
            fn(p)
        except BaseException as exc:  # noqa: BLE001 - forwarded to the caller
            with lock:
                errors.append(exc)
                first = len(errors) == 1
            if first and on_error is not None:
                on_error()

    threads = [threading.Thread(target=target, args=(p,), daemon=True) for p in range(workers)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        real = [e for e in errors if not isinstance(e, WorkerAborted)]
        raise (real or errors)[0]
