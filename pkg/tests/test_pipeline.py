import threading
import time

import numpy as np
import pytest

from falkon_ooc.pipeline import OrderedReducer, StageDelays, run_pipeline


def test_reducer_order_is_batch_order():
    rng = np.random.default_rng(0)
    parts = [rng.standard_normal(5) * 10.0 ** rng.integers(-8, 8) for _ in range(20)]
    ref = np.zeros(5)
    for p in parts:
        ref += p
    red = OrderedReducer(5, 20)
    for b in rng.permutation(20):
        red.add(int(b), parts[b])
    assert np.array_equal(red.result(), ref)


def test_reducer_incomplete():
    red = OrderedReducer(3, 4)
    red.add(1, np.ones(3))
    with pytest.raises(RuntimeError):
        red.result()


@pytest.mark.parametrize("overlap", [True, False])
@pytest.mark.parametrize("workers", [1, 3])
def test_every_batch_once_in_stage_order(overlap, workers):
    log = []
    lock = threading.Lock()

    def load(p, b):
        assert b % workers == p
        return ("x", b)

    def compute(p, b, data):
        assert data == ("x", b)
        return b * b

    def store(p, b, res):
        with lock:
            log.append((b, res))

    run_pipeline(17, workers, load, compute, store, overlap=overlap)
    assert sorted(log) == [(b, b * b) for b in range(17)]
    # within a worker, stores happen in batch order
    for p in range(workers):
        mine = [b for b, _ in log if b % workers == p]
        assert mine == sorted(mine)


@pytest.mark.parametrize("overlap", [True, False])
@pytest.mark.parametrize("workers", [1, 2])
def test_errors_propagate(overlap, workers):
    def compute(p, b, data):
        if b == 5:
            raise ZeroDivisionError("boom")
        return b

    t0 = time.perf_counter()
    with pytest.raises(ZeroDivisionError):
        run_pipeline(40, workers, lambda p, b: b, compute, lambda p, b, r: None, overlap=overlap,
                     delays=StageDelays(0.001, 0.001, 0.001))
    assert time.perf_counter() - t0 < 5


def test_at_most_two_batches_in_flight():
    in_flight = []
    count = [0]
    lock = threading.Lock()

    def load(p, b):
        with lock:
            count[0] += 1
            in_flight.append(count[0])
        time.sleep(0.002)
        return b

    def store(p, b, r):
        with lock:
            count[0] -= 1

    run_pipeline(30, 1, load, lambda p, b, d: d, store, overlap=True)
    # two data slots plus two result slots bound the loaded-but-unstored batches
    assert max(in_flight) <= 4


def test_overlap_ratio_with_delays():
    noop = (lambda p, b: None, lambda p, b, x: None, lambda p, b, r: None)
    d = StageDelays(0.02, 0.02, 0.02)
    t0 = time.perf_counter()
    run_pipeline(16, 1, *noop, overlap=True, delays=d)
    fast = time.perf_counter() - t0
    t0 = time.perf_counter()
    run_pipeline(16, 1, *noop, overlap=False, delays=d)
    slow = time.perf_counter() - t0
    assert fast / slow <= 0.55
