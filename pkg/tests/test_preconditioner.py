import numpy as np
import pytest
from scipy.linalg import solve_triangular

from conftest import dense_kernel, rel
from falkon_ooc.errors import LossContractError
from falkon_ooc.gsc import LOGISTIC, SQUARED
from falkon_ooc.kernels import KernelSpec
from falkon_ooc.memory import MemoryBudget, TransferLedger
from falkon_ooc.preconditioner import PREC_TAG, apply_prec, build_preconditioner, build_weighted_preconditioner

K2 = KernelSpec.gaussian(2.0)
BUDGET = MemoryBudget(3000, 2)  # forces several tiles for m >= 32


def reconstruct(prec):
    T, A = prec.T_upper(), prec.A_upper()
    return T.T @ T, A.T @ A


def test_linear_identity_example():
    m, lam = 6, 0.3
    prec = build_preconditioner(np.eye(m), KernelSpec.linear(), lam, 100, BUDGET)
    np.testing.assert_allclose(prec.T_upper(), np.eye(m), atol=1e-15)
    np.testing.assert_allclose(prec.A_upper(), np.sqrt(1 / m + lam) * np.eye(m), atol=1e-15)


def test_scalar_example():
    lam = 0.5
    prec = build_preconditioner(np.array([[1.3, -0.2]]), K2, lam, 10, BUDGET)
    assert prec.T_upper()[0, 0] == pytest.approx(1.0)
    assert prec.A_upper()[0, 0] == pytest.approx(np.sqrt(1 + lam))


def test_random_reconstruction(rng):
    X_m = rng.standard_normal((64, 3))
    lam = 1e-3
    ledger = TransferLedger()
    prec = build_preconditioner(X_m, K2, lam, 1000, BUDGET, ledger=ledger)
    assert prec.layout.N > 1
    TT, AA = reconstruct(prec)
    Kmm = dense_kernel(K2, X_m, X_m)
    T = prec.T_upper()
    assert rel(TT, Kmm) <= 1e-6
    assert rel(AA, T @ T.T / 64 + lam * np.eye(64)) <= 1e-6
    assert np.allclose(np.tril(T, -1), 0) and np.allclose(np.tril(prec.A_upper(), -1), 0)
    ledger.assert_within(BUDGET)


def test_single_buffer_audit(rng):
    m = 48
    ledger = TransferLedger()
    build_preconditioner(rng.standard_normal((m, 4)), K2, 1e-4, 500, BUDGET, ledger=ledger)
    assert len(ledger.allocations_with_shape((m, m))) == 1
    big = [a for a in ledger.host_allocations if a.size > m]
    assert [a.tag for a in big] == [PREC_TAG]


def test_whitening_identity():
    # the error grows like cond(K_mm) * eps, so keep K_mm moderately conditioned
    k = KernelSpec.gaussian(1.5)
    for seed in range(3):
        X_m = np.random.default_rng(seed).standard_normal((40, 4))
        prec = build_preconditioner(X_m, k, 1e-6, 100, BUDGET)
        assert prec.jitter["T"] == 0
        Kmm = dense_kernel(k, X_m, X_m)
        W = apply_prec(prec, Kmm, "T", transpose=True, inverse=True)
        W = apply_prec(prec, W.T, "T", transpose=True, inverse=True).T
        assert rel(W, np.eye(40)) <= 1e-6


def test_deterministic(rng):
    X_m = rng.standard_normal((50, 3))
    a = build_preconditioner(X_m, K2, 1e-3, 100, BUDGET)
    b = build_preconditioner(X_m, K2, 1e-3, 100, BUDGET)
    assert np.array_equal(a.buf, b.buf)
    assert np.array_equal(a.diag_T, b.diag_T) and np.array_equal(a.diag_A, b.diag_A)


def test_jitter_on_duplicate_points(rng):
    X_m = np.repeat(rng.standard_normal((5, 2)), 4, axis=0)
    prec = build_preconditioner(X_m, K2, 1e-3, 100, BUDGET)
    eps = prec.jitter["T"]
    assert eps > 0
    TT, _ = reconstruct(prec)
    assert rel(TT, dense_kernel(K2, X_m, X_m) + eps * np.eye(20)) <= 1e-6


def test_negative_lambda_rejected(rng):
    with pytest.raises(ValueError):
        build_preconditioner(rng.standard_normal((4, 2)), K2, -1.0, 10, BUDGET)


# -- apply_prec ----------------------------------------------------------------

def test_apply_identity_example(rng):
    prec = build_preconditioner(np.eye(5), KernelSpec.linear(), 0.1, 10, BUDGET)
    v = rng.standard_normal(5)
    for inverse in (False, True):
        for transpose in (False, True):
            np.testing.assert_allclose(apply_prec(prec, v, "T", transpose, inverse), v, rtol=1e-15)


def test_apply_roundtrip_and_dense_oracle(rng):
    X_m = rng.standard_normal((32, 3))
    prec = build_preconditioner(X_m, K2, 1e-2, 100, BUDGET)
    v = rng.standard_normal(32)
    dense = {"T": prec.T_upper(), "A": prec.A_upper()}
    for which in ("T", "A"):
        for transpose in (False, True):
            fwd = apply_prec(prec, v, which, transpose)
            back = apply_prec(prec, fwd, which, transpose, inverse=True)
            assert rel(back, v) <= 1e-12
            M = dense[which].T if transpose else dense[which]
            assert rel(fwd, M @ v) <= 1e-10
            inv = apply_prec(prec, v, which, transpose, inverse=True)
            assert rel(inv, solve_triangular(M, v, lower=transpose)) <= 1e-10
    with pytest.raises(ValueError):
        apply_prec(prec, v, "B")
    with pytest.raises(ValueError):
        apply_prec(prec, v[:5], "T")


# -- weighted variant ----------------------------------------------------------

def test_weighted_squared_reduces_to_plain(rng):
    X_m = rng.standard_normal((30, 2))
    y_m = rng.standard_normal(30)
    alpha0 = rng.standard_normal(30)
    a = build_weighted_preconditioner(X_m, y_m, alpha0, SQUARED, 1e-3, K2, BUDGET, n=200)
    b = build_preconditioner(X_m, K2, 1e-3, 200, BUDGET)
    np.testing.assert_allclose(a.buf, b.buf, rtol=1e-13, atol=1e-14)


def test_weighted_logistic_at_zero(rng):
    X_m = rng.standard_normal((30, 2))
    y_m = np.where(rng.random(30) < 0.5, -1.0, 1.0)
    mu = 1e-2
    prec = build_weighted_preconditioner(X_m, y_m, np.zeros(30), LOGISTIC, mu, K2, BUDGET)
    T, A = prec.T_upper(), prec.A_upper()
    assert rel(A.T @ A, T @ T.T / (4 * 30) + mu * np.eye(30)) <= 1e-12


def test_weighted_dense_oracle(rng):
    m, mu = 32, 1e-3
    X_m = rng.standard_normal((m, 3))
    y_m = np.where(rng.random(m) < 0.5, -1.0, 1.0)
    alpha0 = rng.standard_normal(m)
    prec = build_weighted_preconditioner(X_m, y_m, alpha0, LOGISTIC, mu, K2, BUDGET)
    Kmm = dense_kernel(K2, X_m, X_m)
    T = np.linalg.cholesky(Kmm).T
    D = LOGISTIC.d2(Kmm @ alpha0, y_m)
    M = (T * D) @ T.T / m + mu * np.eye(m)
    A = np.linalg.cholesky(M).T
    assert rel(prec.T_upper(), T) <= 1e-6
    assert rel(prec.A_upper(), A) <= 1e-6


def test_weighted_rejects_negative_curvature(rng):
    class Bad:
        def d2(self, z, y):
            return -np.ones_like(z)

    with pytest.raises(LossContractError):
        build_weighted_preconditioner(rng.standard_normal((4, 2)), np.ones(4), np.ones(4), Bad(), 1.0, K2, BUDGET)
    with pytest.raises(ValueError):
        build_weighted_preconditioner(rng.standard_normal((4, 2)), np.ones(4), np.ones(4), LOGISTIC, 0.0, K2,
                                      BUDGET)
