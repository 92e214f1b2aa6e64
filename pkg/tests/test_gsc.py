import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import solve

from conftest import dense_kernel, rel
from falkon_ooc.errors import InvalidLabelError
from falkon_ooc.gsc import (LOGISTIC, ROBUST, SQUARED, GscLoss, NewtonPath, gsc_falkon_fit, gsc_objective, loss_eval,
                            newton_rhs, weighted_falkon_step, weighted_linop_apply)
from falkon_ooc.kernels import KernelSpec
from falkon_ooc.memory import MemoryBudget, TransferLedger
from falkon_ooc.preconditioner import build_preconditioner, build_weighted_preconditioner
from falkon_ooc.solver import BatchPlan, Dataset, InducingSet, linop_apply, plan_for_budget, predict

K = KernelSpec.gaussian(1.0)
BUDGET = MemoryBudget(10**6)


def classification(n, seed=0):
    rng = np.random.default_rng(seed)
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    X = rng.standard_normal((n, 2)) + y[:, None] * np.array([1.0, 0.5])
    return Dataset(X, y)


def dense_newton_step(data, X_m, loss, mu, alpha0):
    Knm = dense_kernel(K, data.X, X_m)
    Kmm = dense_kernel(K, X_m, X_m)
    z = Knm @ alpha0
    D = loss.d2(z, data.y)
    H = Knm.T @ (D[:, None] * Knm) + mu * data.n * Kmm
    return solve(H, Knm.T @ (D * z - loss.d1(z, data.y)), assume_a="pos")


# -- losses --------------------------------------------------------------------

def test_loss_examples():
    assert LOGISTIC.value(0.0, 1.0) == pytest.approx(math.log(2))
    assert LOGISTIC.d2(0.0, -1.0) == pytest.approx(0.25)
    assert LOGISTIC.d1(0.0, 1.0) == pytest.approx(-0.5)
    assert LOGISTIC.value(10.0, 1.0) == pytest.approx(4.5399e-5, rel=1e-4)
    assert ROBUST.value(0.3, 0.3) == pytest.approx(math.log(2))
    assert ROBUST.d1(0.3, 0.3) == 0.0


def test_loss_eval_and_labels():
    v, d1, d2 = loss_eval(LOGISTIC, np.array([0.0, 1.0]), np.array([1.0, -1.0]))
    assert v.shape == d1.shape == d2.shape == (2,)
    with pytest.raises(InvalidLabelError):
        loss_eval(LOGISTIC, np.zeros(2), np.array([0.0, 1.0]))
    loss_eval(ROBUST, np.zeros(2), np.array([0.0, 3.7]))
    with pytest.raises(ValueError):
        GscLoss("hinge")


def test_losses_stable_for_large_arguments():
    z = np.array([-1e4, -800.0, 800.0, 1e4])
    for loss, y in ((LOGISTIC, np.ones(4)), (ROBUST, np.zeros(4))):
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            vals = [loss.value(z, y), loss.d1(z, y), loss.d2(z, y)]
        assert all(np.all(np.isfinite(v)) for v in vals)
    assert LOGISTIC.value(-1e4, 1.0) == pytest.approx(1e4)
    assert ROBUST.value(1e4, 0.0) == pytest.approx(1e4)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(["logistic", "robust", "squared"]), st.floats(-30, 30), st.floats(-5, 5), st.booleans())
def test_derivatives_finite_differences(kind, z, yr, pos):
    loss = GscLoss(kind)
    y = (1.0 if pos else -1.0) if kind == "logistic" else yr
    h = 1e-4
    fd1 = (loss.value(z + h, y) - loss.value(z - h, y)) / (2 * h)
    fd2 = (loss.d1(z + h, y) - loss.d1(z - h, y)) / (2 * h)
    assert abs(fd1 - loss.d1(z, y)) <= 1e-5
    assert abs(fd2 - loss.d2(z, y)) <= 1e-5
    assert loss.d2(z, y) >= 0


# -- Newton path ---------------------------------------------------------------

def test_path_levels():
    path = NewtonPath(1.0, 0.1, 1e-4)
    assert [round(mu, 12) for mu, _ in path.levels()] == [1.0, 0.1, 0.01, 0.001, 1e-4]
    assert path.levels()[-1] == (1e-4, path.t_final)
    path = NewtonPath(1.0, 0.3, 1e-3, t_inner=4, t_final=9)
    expect = math.ceil(math.log(1.0 / 1e-3) / math.log(1 / 0.3)) + 1
    assert path.n_steps == expect
    assert all(t == 4 for _, t in path.levels()[:-1])
    assert NewtonPath(1e-3, 0.5, 1e-3).n_steps == 1
    assert NewtonPath.default(1e-6).n_steps == 9
    assert NewtonPath.default(1e-6, steps=1).n_steps == 1
    with pytest.raises(ValueError):
        NewtonPath(1.0, 1.5, 1e-3)
    with pytest.raises(ValueError):
        NewtonPath(1e-4, 0.5, 1e-3)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-8, 1.0), st.floats(0.01, 0.99), st.floats(1.0, 1e4))
def test_path_step_count(lam, q, ratio):
    mu0 = lam * ratio
    path = NewtonPath(mu0, q, lam)
    levels = [mu for mu, _ in path.levels()]
    assert all(mu >= lam * (1 - 1e-12) for mu in levels)
    assert levels[-1] == lam
    if len(levels) > 1:
        # the last geometric level is the first one not below lam, the next would be
        assert levels[-2] * q < lam * (1 + 1e-9)


# -- weighted operator ---------------------------------------------------------

def test_weighted_linop_reduces_to_squared():
    data = Dataset(np.random.default_rng(0).standard_normal((150, 3)), np.random.default_rng(1).standard_normal(150))
    ind = InducingSet(data.X[:20], np.arange(20))
    mu = 1e-3
    prec = build_weighted_preconditioner(ind.X_m, data.y[:20], np.ones(20), SQUARED, mu, K, BUDGET, n=150)
    plain = build_preconditioner(ind.X_m, K, mu, 150, BUDGET)
    plan = BatchPlan(40, 20, 3, 150)
    beta = np.random.default_rng(2).standard_normal(20)
    a = weighted_linop_apply(prec, data, ind, K, SQUARED, np.ones(20), mu, beta, plan, BUDGET)
    b = linop_apply(plain, data, ind, K, mu, beta, plan, BUDGET)
    assert rel(a, b) <= 1e-12
    assert np.array_equal(weighted_linop_apply(prec, data, ind, K, SQUARED, np.ones(20), mu, np.zeros(20), plan,
                                               BUDGET), np.zeros(20))


def test_weighted_linop_dense_oracle():
    data = classification(200, 3)
    ind = InducingSet(data.X[:20], np.arange(20))
    rng = np.random.default_rng(4)
    alpha0 = 0.3 * rng.standard_normal(20)
    mu = 1e-3
    prec = build_weighted_preconditioner(ind.X_m, data.y[:20], alpha0, LOGISTIC, mu, K, BUDGET, n=200)
    Knm, Kmm = dense_kernel(K, data.X, ind.X_m), dense_kernel(K, ind.X_m, ind.X_m)
    D = LOGISTIC.d2(Knm @ alpha0, data.y)
    P = np.linalg.solve(prec.T_upper(), np.linalg.inv(prec.A_upper()))
    H = P.T @ (Knm.T @ (D[:, None] * Knm) + mu * 200 * Kmm) @ P
    beta = rng.standard_normal(20)
    got = weighted_linop_apply(prec, data, ind, K, LOGISTIC, alpha0, mu, beta, BatchPlan(64, 20, 2, 200), BUDGET)
    assert rel(got, H @ beta) <= 1e-8


def test_curvature_weights_never_materialized():
    data = classification(4000, 5)
    ind = InducingSet(data.X[:30], np.arange(30))
    budget = MemoryBudget(30_000, 2)
    plan = plan_for_budget(data.n, 30, 2, budget)
    assert plan.B > 4
    ledger = TransferLedger()
    alpha0 = np.full(30, 0.1)
    prec = build_weighted_preconditioner(ind.X_m, data.y[:30], alpha0, LOGISTIC, 1e-3, K, budget, n=data.n,
                                         ledger=ledger)
    weighted_linop_apply(prec, data, ind, K, LOGISTIC, alpha0, 1e-3, np.ones(30), plan, budget, ledger)
    newton_rhs(data, ind, K, LOGISTIC, alpha0, plan, budget, ledger)
    assert all(a.size < data.n for a in ledger.host_allocations)
    assert max(ledger.max_scratch_alloc_by_tag.get("vec", 0), 0) <= plan.q * 1 + 30
    assert ledger.host_resident("knm") == 0
    ledger.assert_within(budget)


# -- Newton steps --------------------------------------------------------------

def test_step_matches_dense_newton():
    data = classification(50, 6)
    ind = InducingSet(data.X.copy(), np.arange(50))
    rng = np.random.default_rng(7)
    mu = 1e-2
    for alpha0 in (np.zeros(50), 0.05 * rng.standard_normal(50)):
        got = weighted_falkon_step(data, ind, LOGISTIC, mu, 50, alpha0, K, BUDGET)
        ref = dense_newton_step(data, ind.X_m, LOGISTIC, mu, alpha0)
        assert rel(got, ref) <= 1e-5


def test_step_fixed_point():
    data = classification(300, 8)
    ind = InducingSet(data.X[:30], np.arange(30))
    mu = 1e-2
    alpha = np.zeros(30)
    for _ in range(30):
        alpha = dense_newton_step(data, ind.X_m, LOGISTIC, mu, alpha)
    got = weighted_falkon_step(data, ind, LOGISTIC, mu, 30, alpha, K, BUDGET)
    assert rel(got, alpha) <= 1e-8


def test_step_label_negation():
    data = classification(300, 9)
    flipped = Dataset(data.X, -data.y)
    ind = InducingSet(data.X[:25], np.arange(25))
    alpha0 = 0.1 * np.random.default_rng(0).standard_normal(25)
    a = weighted_falkon_step(data, ind, LOGISTIC, 1e-2, 10, alpha0, K, BUDGET)
    b = weighted_falkon_step(flipped, ind, LOGISTIC, 1e-2, 10, -alpha0, K, BUDGET)
    assert rel(b, -a) <= 1e-10


def _inner_values(levels=6):
    """Objective and Newton model along the CG iterates of each step."""
    data = classification(2000, 10)
    ind = InducingSet(data.X[:100], np.arange(100))
    plan = plan_for_budget(data.n, 100, 2, BUDGET)
    Knm, Kmm = dense_kernel(K, data.X, ind.X_m), dense_kernel(K, ind.X_m, ind.X_m)
    alpha = np.zeros(100)
    out = []
    for mu, t in NewtonPath.default(1e-6).levels()[:levels]:
        z = Knm @ alpha
        g = Knm.T @ LOGISTIC.d1(z, data.y) / data.n + mu * Kmm @ alpha
        H = Knm.T @ (LOGISTIC.d2(z, data.y)[:, None] * Knm) / data.n + mu * Kmm
        a0 = alpha.copy()
        model = [0.0]
        objective = [gsc_objective(data, ind, K, LOGISTIC, a0, mu, plan, BUDGET)]

        def record(k, a):
            model.append(g @ (a - a0) + 0.5 * (a - a0) @ H @ (a - a0))
            objective.append(gsc_objective(data, ind, K, LOGISTIC, a, mu, plan, BUDGET))

        alpha = weighted_falkon_step(data, ind, LOGISTIC, mu, t, alpha, K, BUDGET, callback=record)
        out.append((mu, model, objective))
    return out


@pytest.fixture(scope="module")
def inner_values():
    return _inner_values()


def test_step_newton_model_monotone_inside_cg(inner_values):
    for mu, model, _ in inner_values:
        assert len(model) > 2
        assert all(b <= a + 1e-8 for a, b in zip(model, model[1:])), mu


def test_step_objective_below_start(inner_values):
    for mu, _, objective in inner_values:
        assert objective[-1] <= objective[0] + 1e-8, mu


@pytest.mark.xfail(strict=True, reason="a full (undamped) Newton step can overshoot the true objective "
                                       "mid-solve by ~1e-5; only the quadratic model is monotone")
def test_step_objective_monotone_inside_cg(inner_values):
    for mu, _, objective in inner_values:
        assert all(b <= a + 1e-8 for a, b in zip(objective, objective[1:])), mu


def test_objective_value():
    data = classification(100, 11)
    ind = InducingSet(data.X[:10], np.arange(10))
    alpha = np.random.default_rng(1).standard_normal(10)
    Knm, Kmm = dense_kernel(K, data.X, ind.X_m), dense_kernel(K, ind.X_m, ind.X_m)
    ref = np.mean(LOGISTIC.value(Knm @ alpha, data.y)) + 0.5 * 0.1 * alpha @ Kmm @ alpha
    got = gsc_objective(data, ind, K, LOGISTIC, alpha, 0.1, BatchPlan(13, 10, 2, 100), BUDGET)
    assert got == pytest.approx(ref, rel=1e-12)


# -- outer loop ----------------------------------------------------------------

def test_fit_degenerate_path():
    data = classification(400, 12)
    path = NewtonPath(1e-3, 0.5, 1e-3, t_final=15)
    model = gsc_falkon_fit(data, LOGISTIC, path, 30, 0, K, BUDGET)
    assert len(model.trace.steps) == 1
    step = weighted_falkon_step(data, model.inducing, LOGISTIC, 1e-3, 15, np.zeros(30), K, BUDGET)
    assert rel(model.alpha, step) <= 1e-12


def test_fit_step_count_and_trace():
    data = classification(1000, 13)
    path = NewtonPath(1.0, 0.2, 1e-4)
    model = gsc_falkon_fit(data, LOGISTIC, path, 40, 0, K, BUDGET)
    assert len(model.trace.steps) == math.ceil(math.log(1e4) / math.log(5)) + 1
    assert [s[0] for s in model.trace.steps] == [mu for mu, _ in path.levels()]
    for _, before, after in model.trace.steps:
        assert after <= before + 1e-8
    with pytest.raises(InvalidLabelError):
        gsc_falkon_fit(Dataset(data.X, (data.y + 1) / 2), LOGISTIC, path, 40, 0, K, BUDGET)


def test_fit_robust_regression():
    rng = np.random.default_rng(14)
    X = rng.uniform(-2, 2, (1500, 1))
    y = np.sin(2 * X[:, 0]) + 0.1 * rng.standard_normal(1500)
    y[rng.choice(1500, 75, replace=False)] += 20.0  # gross outliers
    data = Dataset(X, y)
    model = gsc_falkon_fit(data, ROBUST, NewtonPath.default(1e-6, steps=6), 50, 0, K, BUDGET)
    grid = np.linspace(-1.8, 1.8, 200)[:, None]
    err = np.abs(predict(model, grid) - np.sin(2 * grid[:, 0]))
    assert err.mean() < 0.1
