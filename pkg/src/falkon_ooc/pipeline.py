"""Per-worker load -> compute -> store pipeline over a list of batches.

Each worker runs three stage threads. Two data slots and two result slots
(semaphores) bound what is in flight, so while batch ``b`` is computed,
batch ``b+1`` can be loading and batch ``b-1`` storing: ``B`` batches take
about ``B + 2`` stage times instead of ``3B``. With ``overlap=False`` the
stages of each worker run back to back on one thread.

Stage delays can be injected to emulate transfer and compute costs.
"""
from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import WorkerAborted

SLOTS = 2
_POLL = 0.05


@dataclass(frozen=True)
class StageDelays:
    load: float = 0.0
    compute: float = 0.0
    store: float = 0.0


NO_DELAYS = StageDelays()


class OrderedReducer:
    """Adds per-batch contributions into a float64 total in batch order."""

    def __init__(self, size: int, n_batches: int):
        self.total = np.zeros(size, dtype=np.float64)
        self.n_batches = n_batches
        self._next = 0
        self._pending = {}
        self._lock = threading.Lock()

    def add(self, b: int, contribution):
        with self._lock:
            self._pending[b] = contribution
            while self._next in self._pending:
                self.total += self._pending.pop(self._next)
                self._next += 1

    def result(self) -> np.ndarray:
        if self._next != self.n_batches:
            raise RuntimeError(f"reducer saw {self._next} of {self.n_batches} batches")
        return self.total


class _Run:
    def __init__(self):
        self.failed = threading.Event()
        self.errors = []
        self._lock = threading.Lock()

    def fail(self, exc):
        with self._lock:
            self.errors.append(exc)
        self.failed.set()

    def acquire(self, sem):
        while not sem.acquire(timeout=_POLL):
            if self.failed.is_set():
                raise WorkerAborted("pipeline aborted")

    def get(self, q):
        while True:
            try:
                return q.get(timeout=_POLL)
            except queue.Empty:
                if self.failed.is_set():
                    raise WorkerAborted("pipeline aborted") from None

    def guard(self, fn, *args):
        try:
            fn(*args)
        except BaseException as exc:  # noqa: BLE001 - forwarded to the caller
            if not isinstance(exc, WorkerAborted):
                self.fail(exc)
            else:
                self.failed.set()


_DONE = object()


def _overlapped_worker(run, p, items, load, compute, store, delays, slots, threads):
    data_slots = threading.Semaphore(slots)
    result_slots = threading.Semaphore(slots)
    q_loaded = queue.Queue()
    q_done = queue.Queue()

    def load_stage():
        for b in items:
            run.acquire(data_slots)
            if delays.load:
                time.sleep(delays.load)
            q_loaded.put((b, load(p, b)))
        q_loaded.put(_DONE)

    def compute_stage():
        while True:
            msg = run.get(q_loaded)
            if msg is _DONE:
                break
            b, data = msg
            run.acquire(result_slots)
            if delays.compute:
                time.sleep(delays.compute)
            res = compute(p, b, data)
            data_slots.release()
            q_done.put((b, res))
        q_done.put(_DONE)

    def store_stage():
        while True:
            msg = run.get(q_done)
            if msg is _DONE:
                break
            b, res = msg
            if delays.store:
                time.sleep(delays.store)
            store(p, b, res)
            result_slots.release()

    for stage in (load_stage, compute_stage, store_stage):
        threads.append(threading.Thread(target=run.guard, args=(stage,), daemon=True))


def _serial_worker(run, p, items, load, compute, store, delays):
    def body():
        for b in items:
            if run.failed.is_set():
                raise WorkerAborted("pipeline aborted")
            if delays.load:
                time.sleep(delays.load)
            data = load(p, b)
            if delays.compute:
                time.sleep(delays.compute)
            res = compute(p, b, data)
            if delays.store:
                time.sleep(delays.store)
            store(p, b, res)
    return body


def run_pipeline(n_batches: int, workers: int, load, compute, store, *, overlap: bool = True,
                 delays: StageDelays = NO_DELAYS, slots: int = SLOTS):
    """Run ``load(p, b) -> data``, ``compute(p, b, data) -> res``, ``store(p, b, res)``.

    Batch ``b`` goes to worker ``b % workers``. ``compute`` must release the
    scratch held by ``data``, and ``store`` the scratch held by ``res``.
    """
    run = _Run()
    threads = []
    for p in range(workers):
        items = list(range(p, n_batches, workers))
        if not items:
            continue
        if overlap:
            _overlapped_worker(run, p, items, load, compute, store, delays, slots, threads)
        else:
            body = _serial_worker(run, p, items, load, compute, store, delays)
            threads.append(threading.Thread(target=run.guard, args=(body,), daemon=True))
    if len(threads) == 1:
        threads[0].run()
    else:
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    if run.errors:
        raise run.errors[0]
