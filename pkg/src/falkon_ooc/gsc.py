"""Self-concordant losses and the approximate Newton outer loop.

For a loss ``l(z, y)`` the objective at level ``mu`` is

    J_mu(alpha) = (1/n) sum_i l((K_nm alpha)_i, y_i) + (mu/2) alpha^T K_mm alpha.

One Newton step from ``alpha0`` solves

    (K_nm^T D K_nm + mu n K_mm) alpha = K_nm^T (D z - g),   z = K_nm alpha0,

with ``g = l'(z, y)`` and ``D = diag(l''(z, y))``, preconditioned like the
squared-loss solver but with a curvature-weighted preconditioner built at
the inducing points. The outer loop walks ``mu`` down a geometric path and
finishes with a longer solve at the target ``lam``.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import InvalidLabelError
from .kernels import KernelSpec
from .memory import MemoryBudget, TransferLedger
from .ooc.layout import plan_tiles
from .preconditioner import _kernel_matvec_blocked, apply_prec, build_weighted_preconditioner
from .solver import (DEFAULT_BUDGET, CgConfig, Dataset, FalkonModel, InducingSet, StreamConfig,
                     _check_m, _matvec, conjugate_gradient, knm_predict, plan_for_budget,
                     precondition_coef, precondition_rhs, stream_kernel_batches, subsample_inducing,
                     unprecondition)

log = logging.getLogger(__name__)

LOSS_KINDS = ("logistic", "robust", "squared")


@dataclass(frozen=True)
class GscLoss:
    """Loss with value and first two derivatives in the prediction ``z``.

    ``logistic``: ``log(1 + exp(-y z))`` with ``y`` in {-1, +1}.
    ``robust``: ``phi(z - y)`` with ``phi(u) = log(e^u + e^-u)``.
    ``squared``: ``(z - y)^2 / 2``; not self-concordant in the strict sense,
    kept because it reduces the Newton machinery to plain ridge regression.
    """

    kind: str

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}")

    def check_labels(self, y):
        if self.kind == "logistic":
            y = np.asarray(y)
            if not np.all((y == 1) | (y == -1)):
                raise InvalidLabelError("logistic loss needs labels in {-1, +1}")

    def value(self, z, y):
        z, y = np.asarray(z, dtype=np.float64), np.asarray(y, dtype=np.float64)
        if self.kind == "logistic":
            return np.logaddexp(0.0, -y * z)
        if self.kind == "robust":
            u = z - y
            return np.logaddexp(u, -u)
        return 0.5 * (z - y) ** 2

    def d1(self, z, y):
        z, y = np.asarray(z, dtype=np.float64), np.asarray(y, dtype=np.float64)
        if self.kind == "logistic":
            return -y * expit(-y * z)
        if self.kind == "robust":
            return np.tanh(z - y)
        return z - y

    def d2(self, z, y):
        z, y = np.asarray(z, dtype=np.float64), np.asarray(y, dtype=np.float64)
        if self.kind == "logistic":
            return expit(z) * expit(-z)
        if self.kind == "robust":
            th = np.tanh(z - y)
            return 1.0 - th * th
        return np.ones(np.broadcast(z, y).shape)


LOGISTIC = GscLoss("logistic")
ROBUST = GscLoss("robust")
SQUARED = GscLoss("squared")


def loss_eval(loss: GscLoss, z, y):
    """``(value, d1, d2)`` evaluated elementwise."""
    loss.check_labels(y)
    return loss.value(z, y), loss.d1(z, y), loss.d2(z, y)


@dataclass(frozen=True)
class NewtonPath:
    mu0: float
    q: float
    lam_final: float
    t_inner: int = 10
    t_final: int = 20

    def __post_init__(self):
        if not 0 < self.q < 1:
            raise ValueError("decay factor q must lie in (0, 1)")
        if not self.lam_final > 0 or self.mu0 < self.lam_final:
            raise ValueError("need mu0 >= lam_final > 0")
        if self.t_inner < 1 or self.t_final < 1:
            raise ValueError("iteration counts must be positive")

    @classmethod
    def default(cls, lam: float, steps: int = 9, mu0: float = 1.0, t_inner: int = 10,
                t_final: int = 20) -> "NewtonPath":
        """Geometric path from ``mu0`` reaching ``lam`` in ``steps`` outer steps."""
        if steps < 1:
            raise ValueError("need at least one Newton step")
        if lam >= mu0 or steps == 1:
            return cls(max(mu0, lam) if steps > 1 else lam, 0.5, lam, t_inner, t_final)
        return cls(mu0, (lam / mu0) ** (1.0 / (steps - 1)), lam, t_inner, t_final)

    def levels(self) -> list:
        """``[(mu, cg_iterations), ...]`` ending with the final level."""
        ratio = math.log(self.mu0 / self.lam_final) / math.log(1.0 / self.q)
        k = max(0, math.ceil(ratio - 1e-9))
        out = [(self.mu0 * self.q**i, self.t_inner) for i in range(k)]
        out.append((self.lam_final, self.t_final))
        return out

    @property
    def n_steps(self) -> int:
        return len(self.levels())


# -- streamed weighted products -----------------------------------------------------

def _weighted_fn(loss):
    def fn(Kb, mv, nv, arena):
        qb = Kb.shape[0]
        z = _matvec(arena, Kb, mv["alpha"], qb)
        u = _matvec(arena, Kb, mv["v"], qb)
        u *= loss.d2(z, nv["y"])
        c = _matvec(arena, Kb.T, u, Kb.shape[1])
        arena.free(z, u)
        return c, None
    return fn


def _newton_rhs_fn(loss):
    def fn(Kb, mv, nv, arena):
        qb = Kb.shape[0]
        z = _matvec(arena, Kb, mv["alpha"], qb)
        y = nv["y"]
        u = arena.empty(qb, np.float64, "vec")
        np.multiply(loss.d2(z, y), z, out=u)
        u -= loss.d1(z, y)
        c = _matvec(arena, Kb.T, u, Kb.shape[1])
        arena.free(z, u)
        return c, None
    return fn


def weighted_linop_apply(prec, data: Dataset, inducing: InducingSet, kernel: KernelSpec, loss: GscLoss,
                         f_current, mu: float, beta, plan, budget: MemoryBudget,
                         ledger: TransferLedger | None = None, cfg: StreamConfig | None = None) -> np.ndarray:
    """``A^{-T}[T^{-T} K_nm^T D K_nm T^{-1} + mu n I] A^{-1} beta``.

    ``f_current`` holds the coefficients of the current model; the curvature
    weights ``D`` are formed batch by batch from its streamed predictions.
    """
    cfg = cfg or StreamConfig()
    alpha = _check_m(inducing, f_current, "f_current")
    v = apply_prec(prec, _check_m(inducing, beta, "beta"), "A", inverse=True)
    u = apply_prec(prec, v, "T", inverse=True)
    c = stream_kernel_batches(data.X, inducing.X_m, kernel, plan, budget, ledger, _weighted_fn(loss),
                              m_vecs={"v": u, "alpha": alpha}, n_vecs={"y": data.y}, cfg=cfg)
    c = apply_prec(prec, c, "T", transpose=True, inverse=True)
    c += mu * data.n * v
    return apply_prec(prec, c, "A", transpose=True, inverse=True)


def newton_rhs(data: Dataset, inducing: InducingSet, kernel: KernelSpec, loss: GscLoss, alpha0, plan,
               budget: MemoryBudget, ledger: TransferLedger | None = None,
               cfg: StreamConfig | None = None) -> np.ndarray:
    """``K_nm^T (D z - g)`` at ``alpha0``."""
    return stream_kernel_batches(data.X, inducing.X_m, kernel, plan, budget, ledger, _newton_rhs_fn(loss),
                                 m_vecs={"alpha": alpha0}, n_vecs={"y": data.y}, cfg=cfg or StreamConfig())


def gsc_objective(data: Dataset, inducing: InducingSet, kernel: KernelSpec, loss: GscLoss, alpha, mu: float,
                  plan, budget: MemoryBudget, ledger: TransferLedger | None = None,
                  cfg: StreamConfig | None = None) -> float:
    """``(1/n) sum l(f(x_i), y_i) + (mu/2) alpha^T K_mm alpha``."""
    cfg = cfg or StreamConfig()
    alpha = _check_m(inducing, alpha, "alpha")
    z = knm_predict(data.X, inducing, kernel, alpha, plan, budget, ledger, cfg)
    layout = plan_tiles(inducing.m, budget)
    kmm_a = _kernel_matvec_blocked(kernel, inducing.X_m, alpha, layout, budget,
                                   ledger if ledger is not None else TransferLedger(), cfg.policy)
    return float(np.mean(loss.value(z, data.y)) + 0.5 * mu * float(alpha @ kmm_a))


def _inducing_targets(data, inducing):
    if inducing.indices is None:
        raise ValueError("inducing set must record its source rows")
    return data.y[inducing.indices]


def weighted_falkon_step(data: Dataset, inducing: InducingSet, loss: GscLoss, mu: float, t: int, alpha0,
                         kernel: KernelSpec, budget: MemoryBudget = DEFAULT_BUDGET, *,
                         ledger: TransferLedger | None = None, cfg: StreamConfig | None = None,
                         plan=None, callback=None, record_history: bool = False):
    """One approximate Newton step at level ``mu`` starting from ``alpha0``.

    CG is warm-started at ``beta0 = A T alpha0`` and ``t`` iterations are run.
    ``callback(k, alpha_k)`` receives the current coefficients after every CG
    iteration. Returns the new coefficients.
    """
    cfg = cfg or StreamConfig()
    loss.check_labels(data.y)
    alpha0 = _check_m(inducing, alpha0, "alpha0")
    if not np.all(np.isfinite(alpha0)):
        raise ValueError("alpha0 must be finite")
    ledger = ledger if ledger is not None else TransferLedger()
    plan = plan or plan_for_budget(data.n, inducing.m, data.d, budget, cfg.policy, data.X)
    prec = build_weighted_preconditioner(inducing.X_m, _inducing_targets(data, inducing), alpha0, loss, mu,
                                         kernel, budget, n=data.n, ledger=ledger, policy=cfg.policy)
    rhs = precondition_rhs(prec, newton_rhs(data, inducing, kernel, loss, alpha0, plan, budget, ledger, cfg))

    def op(beta):
        return weighted_linop_apply(prec, data, inducing, kernel, loss, alpha0, mu, beta, plan, budget,
                                    ledger, cfg)

    cb = None
    if callback is not None:
        def cb(k, beta):
            callback(k, unprecondition(prec, beta))
    beta0 = precondition_coef(prec, alpha0)
    beta, hist = conjugate_gradient(op, rhs, CgConfig(t, None, record_history), x0=beta0, callback=cb)
    alpha = unprecondition(prec, beta)
    if record_history:
        return alpha, hist
    return alpha


@dataclass
class GscTrace:
    """Objective values around each outer step: ``(mu, before, after)``."""

    steps: list = field(default_factory=list)


def gsc_falkon_fit(data: Dataset, loss: GscLoss, path: NewtonPath, m: int, seed, kernel: KernelSpec,
                   budget: MemoryBudget = DEFAULT_BUDGET, *, ledger: TransferLedger | None = None,
                   cfg: StreamConfig | None = None, inducing: InducingSet | None = None,
                   track_objective: bool = True) -> FalkonModel:
    """Approximate Newton along ``path`` from ``alpha = 0``.

    With ``track_objective`` the objective at each level is evaluated before
    and after the step (stored in ``model.trace``); a step that
    fails to decrease it triggers a warning.
    """
    cfg = cfg or StreamConfig()
    if data.y is None:
        raise ValueError("training data needs targets")
    loss.check_labels(data.y)
    ledger = ledger if ledger is not None else TransferLedger()
    inducing = inducing or subsample_inducing(data, m, seed)
    plan = plan_for_budget(data.n, inducing.m, data.d, budget, cfg.policy, data.X)
    alpha = np.zeros(inducing.m)
    trace = GscTrace()
    t0 = time.perf_counter()
    for mu, t in path.levels():
        before = gsc_objective(data, inducing, kernel, loss, alpha, mu, plan, budget, ledger, cfg) \
            if track_objective else None
        alpha = weighted_falkon_step(data, inducing, loss, mu, t, alpha, kernel, budget,
                                     ledger=ledger, cfg=cfg, plan=plan)
        if track_objective:
            after = gsc_objective(data, inducing, kernel, loss, alpha, mu, plan, budget, ledger, cfg)
            trace.steps.append((mu, before, after))
            if after > before + 1e-8 * max(1.0, abs(before)):
                warnings.warn(f"objective did not decrease at level mu={mu:.3g}: {before:.6g} -> {after:.6g}",
                              RuntimeWarning, stacklevel=2)
        log.info("newton step at mu=%.3g done", mu)
    timings = {"iterations": time.perf_counter() - t0}
    return FalkonModel(inducing, alpha, kernel, path.lam_final, path.t_final, seed, cfg.policy, timings,
                       trace=trace)
