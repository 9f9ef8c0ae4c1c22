"""Adaptive quadratic-regularization quasi-Newton solver with inexact oracles.

The outer loop builds, at each iterate x_k, a quadratic model of the smooth
part plus the regularizer and an adaptive quadratic penalty sigma_k.  A first
(inexact) proximal step with step length ``nu_k = theta1 / (||B_k|| + sigma_k)``
provides both the stationarity measure ``nu_k^-1 ||shat_cp||`` and a
sufficient-decrease threshold; an inner proximal-gradient solver then refines
the step against the full quadratic model.  The achieved-vs-predicted ratio
drives step acceptance and the sigma update.  Objective/gradient accuracy can
be tied to a geometric schedule that tightens on unsuccessful iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import prox as px
from .regularizers import BoundInputs, Regularizer, reg_value, step_norm_bound

STATUS_FIRST_ORDER = "first_order"
STATUS_MAX_ITER = "max_iter"
STATUS_PROX_FAILURE = "prox_failure"

VERY_SUCCESSFUL = "very_successful"
SUCCESSFUL = "successful"
UNSUCCESSFUL = "unsuccessful"
CONVERGED = "converged"

_MAX_CONSECUTIVE_PROX_FAILURES = 50


class OracleError(RuntimeError):
    """Inexact oracle could not produce a value (e.g. integrator breakdown)."""


@dataclass
class SolverParams:
    """Constants of the outer/inner loops.

    Defaults follow standard regularization-method practice; the admissible
    ranges are validated on construction.
    """

    theta1: float = 0.5
    theta2: float = 100.0
    gamma1: float = 3.0
    gamma2: float = 3.0
    gamma3: float = 0.5
    eta1_hat: float = 1e-4
    eta2_hat: float = 0.9
    sigma_min: float = 1e-8
    sigma0: float = 1.0
    epsilon: float = 1e-6
    kappa_s: float = 1.0
    mode: str = px.INEXACT
    max_iter: int = 10_000
    kappa_inner: float = 0.1
    inner_max_iter: int = 500
    prox_native_tol: float = 1e-10
    prox_max_inner: int = 10_000

    def __post_init__(self):
        if not 0.0 < self.theta1 < 1.0 < self.theta2:
            raise ValueError("need 0 < theta1 < 1 < theta2")
        if not 1.0 < self.gamma1 <= self.gamma2:
            raise ValueError("need 1 < gamma1 <= gamma2")
        if not 0.0 < self.gamma3 <= 1.0:
            raise ValueError("need 0 < gamma3 <= 1")
        if not 0.0 < self.eta1_hat <= self.eta2_hat < 1.0:
            raise ValueError("need 0 < eta1_hat <= eta2_hat < 1")
        if not self.sigma_min > 0.0:
            raise ValueError("sigma_min must be > 0")
        if not self.sigma0 >= self.sigma_min:
            raise ValueError("sigma0 must be >= sigma_min")
        if not self.epsilon > 0.0:
            raise ValueError("epsilon must be > 0")
        if not 0.0 < self.kappa_s <= 1.0:
            raise ValueError("kappa_s must lie in (0, 1]")
        if self.mode not in (px.EXACT, px.INEXACT):
            raise ValueError(f"unknown mode {self.mode!r}")


# ---------------------------------------------------------------------------
# Quasi-Newton models
# ---------------------------------------------------------------------------


class ZeroHessian:
    """B = 0; reduces the method to an adaptive proximal-gradient scheme."""

    kind = "zero"
    norm_estimate = 0.0

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return np.zeros_like(v)

    def update(self, s: np.ndarray, y: np.ndarray) -> None:
        pass


class SpectralDiagonalHessian:
    """B = (s'y / s's) * I, the Rayleigh spectral estimate, clamped positive."""

    kind = "diag"
    CLAMP_LO = 1e-8
    CLAMP_HI = 1e8

    def __init__(self):
        self.coeff = self.CLAMP_LO

    @property
    def norm_estimate(self) -> float:
        return self.coeff

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.coeff * v

    def update(self, s: np.ndarray, y: np.ndarray) -> None:
        ss = float(s @ s)
        if ss <= 0.0:
            return
        self.coeff = float(np.clip(float(s @ y) / ss, self.CLAMP_LO, self.CLAMP_HI))


class LsR1Hessian:
    """Limited-memory symmetric rank-one model rebuilt from stored pairs.

    The operator is ``gamma*I + sum_j r_j r_j' / (r_j' s_j)`` with the ``r_j``
    recomputed by replaying the stored (s, y) pairs.  Pairs failing the usual
    ``|r's| >= 1e-8 ||r|| ||s||`` safeguard are skipped.  The norm estimate
    comes from a short deterministic power iteration, cached per rebuild.
    """

    kind = "lsr1"
    SKIP_TOL = 1e-8

    def __init__(self, memory: int = 5):
        if memory < 1:
            raise ValueError("memory must be >= 1")
        self.memory = memory
        self.pairs: list[tuple[np.ndarray, np.ndarray]] = []
        self.gamma = 1.0
        self._rs: list[np.ndarray] = []
        self._denoms: list[float] = []
        self._norm = 0.0

    @property
    def norm_estimate(self) -> float:
        return self._norm

    def matvec(self, v: np.ndarray) -> np.ndarray:
        out = self.gamma * v
        for r, d in zip(self._rs, self._denoms):
            out = out + (float(r @ v) / d) * r
        return out

    def update(self, s: np.ndarray, y: np.ndarray) -> None:
        r = y - self.matvec(s)
        rs = float(r @ s)
        if abs(rs) < self.SKIP_TOL * float(np.linalg.norm(r)) * float(np.linalg.norm(s)):
            return
        sy = float(s @ y)
        ss = float(s @ s)
        if sy > 0.0 and ss > 0.0:
            self.gamma = float(np.clip(sy / ss, 1e-8, 1e8))
        self.pairs.append((s.copy(), y.copy()))
        if len(self.pairs) > self.memory:
            self.pairs.pop(0)
        self._rebuild()

    def _rebuild(self) -> None:
        self._rs = []
        self._denoms = []
        for s, y in self.pairs:
            r = y - self.matvec(s)
            rs = float(r @ s)
            if abs(rs) < self.SKIP_TOL * float(np.linalg.norm(r)) * float(np.linalg.norm(s)):
                continue
            self._rs.append(r)
            self._denoms.append(rs)
        self._norm = self._power_norm()

    def _power_norm(self, iters: int = 10) -> float:
        if not self._rs:
            return self.gamma
        n = self._rs[0].size
        v = np.ones(n) / math.sqrt(n)
        est = self.gamma
        for _ in range(iters):
            bv = self.matvec(v)
            nrm = float(np.linalg.norm(bv))
            if nrm == 0.0:
                return 0.0
            est = nrm
            v = bv / nrm
        return est


HessianModel = ZeroHessian | SpectralDiagonalHessian | LsR1Hessian


def make_hessian(kind: str, memory: int = 5) -> HessianModel:
    if kind == "zero":
        return ZeroHessian()
    if kind == "diag":
        return SpectralDiagonalHessian()
    if kind == "lsr1":
        return LsR1Hessian(memory)
    raise ValueError(f"unknown hessian kind {kind!r}")


def hessian_update(model: HessianModel, s: np.ndarray, y: np.ndarray) -> HessianModel:
    """Incorporate a step / gradient-difference pair; skips are silent."""
    model.update(np.asarray(s, dtype=float), np.asarray(y, dtype=float))
    return model


# ---------------------------------------------------------------------------
# Scalar pieces
# ---------------------------------------------------------------------------


def nu_from_sigma(theta1: float, B, sigma: float) -> float:
    """Prox step length ``theta1 / (||B|| + sigma)``."""
    if not sigma > 0.0:
        raise ValueError("sigma must be > 0")
    return theta1 / (B.norm_estimate + sigma)


def xi_hat_cp(ghat, shat, h_at_x: float, h_at_x_plus_s: float) -> float:
    """First-order model decrease ``-ghat's + h(x) - h(x+s)``."""
    return px.xi_hat_cp(np.asarray(ghat, float), np.asarray(shat, float),
                        h_at_x, h_at_x_plus_s)


def rho_hat(fhat_x: float, fhat_xs: float, h_x: float, h_xs: float,
            ghat: np.ndarray, B, s: np.ndarray) -> tuple[float, float]:
    """Achieved vs. predicted decrease ratio and its denominator.

    The denominator is the quadratic-model decrease (no sigma term).  A
    nonpositive or non-finite denominator yields ``-inf`` so the iteration is
    declared unsuccessful by the caller.
    """
    denom = -float(ghat @ s) - 0.5 * float(s @ B.matvec(s)) + h_x - h_xs
    num = fhat_x + h_x - fhat_xs - h_xs
    if not math.isfinite(denom) or denom <= 0.0 or not math.isfinite(num):
        return -math.inf, denom
    return num / denom, denom


def sigma_update(sigma: float, rho: float, params: SolverParams) -> float:
    """Regularization update with the deterministic interval endpoints."""
    if rho >= params.eta2_hat:
        sigma = params.gamma3 * sigma
    elif rho >= params.eta1_hat:
        pass
    else:
        sigma = params.gamma1 * sigma
    return max(sigma, params.sigma_min)


@dataclass
class PrecSchedule:
    """Geometric accuracy schedule driven by the unsuccessful-iteration count.

    ``value()`` interpolates from ``prec_hi`` down to ``prec_lo`` as ``n_F``
    grows, reaching ``prec_lo`` exactly at ``n_F >= N``.
    """

    N: int
    prec_hi: float = 1e-3
    prec_lo: float = 1e-14
    n_F: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")

    def value(self) -> float:
        if self.n_F >= self.N:
            return self.prec_lo
        val = self.prec_hi * math.exp(math.log(self.prec_lo / self.prec_hi) * self.n_F / self.N)
        return max(val, self.prec_lo)

    def record_failure(self) -> None:
        self.n_F += 1


def prec_schedule_value(sched: PrecSchedule) -> float:
    return sched.value()


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


@dataclass
class IterationRecord:
    """One outer-iteration row of the solver trace.

    The terminal stopping check is recorded with ``status='converged'`` and
    NaN ratio fields.  ``inner_early_margin_min`` is the smallest ratio
    ``||s|| / (kappa_s * M)`` over the iteration's early-stopped prox calls
    (>= 1 whenever the early-norm rule fired).
    """

    k: int
    f: float
    h: float
    xi_cp: float
    nu: float
    sigma: float
    rho: float
    status: str
    s_norm: float
    shat_norm: float
    cauchy_prox_iters: int
    cauchy_stop_reason: str
    inner_iters: int
    inner_prox_calls: int
    inner_prox_iters: int
    prec: float
    measure: float
    bound: float
    model_at_s: float
    model_at_shat: float
    inner_early_margin_min: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SolveResult:
    x: np.ndarray
    status: str
    trace: list[IterationRecord]

    @property
    def iterations(self) -> int:
        return sum(1 for r in self.trace if r.status != CONVERGED)


@dataclass
class _InnerStats:
    iters: int = 0
    prox_calls: int = 0
    prox_iters: int = 0
    early_margin_min: float = math.inf


# ---------------------------------------------------------------------------
# Inner solver: proximal-gradient refinement of the quadratic model
# ---------------------------------------------------------------------------


def ir2_solve(ghat: np.ndarray, B, sigma: float, reg: Regularizer, x: np.ndarray,
              s_init: np.ndarray, params: SolverParams, inner_tol: float,
              rng: np.random.Generator, h_fun=None) -> tuple[np.ndarray, _InnerStats]:
    """Refine a step against ``m(s) = ghat's + s'Bs/2 + sigma||s||^2/2 + h(x+s)``.

    Adaptive proximal-gradient iterations (zero model curvature inside, exact
    quadratic evaluations) continue from ``s_init``; only model-decreasing
    steps are accepted, so the returned step never exceeds the model value at
    ``s_init``.  Stops when the inner stationarity measure drops below
    ``inner_tol`` or the iteration budget runs out.
    """
    if h_fun is None:
        h_fun = lambda y: reg_value(y, reg)

    def quad(s: np.ndarray) -> float:
        return float(ghat @ s) + 0.5 * float(s @ B.matvec(s)) + 0.5 * sigma * float(s @ s)

    def mval(s: np.ndarray) -> float:
        return quad(s) + h_fun(x + s)

    stats = _InnerStats()
    s = s_init.copy()
    m_s = mval(s)
    best_s, best_m = s, m_s
    sigma_in = max(B.norm_estimate + sigma, params.sigma_min)
    failures = 0

    for _ in range(params.inner_max_iter):
        grad = ghat + B.matvec(s) + sigma * s
        nu_in = params.theta1 / sigma_in
        base = x + s
        gnorm = float(np.linalg.norm(grad))
        bound = step_norm_bound(reg, BoundInputs(x=base, nu=nu_in, ghat_norm=gnorm))
        query = px.ProxQuery(x=base, ghat=grad, nu=nu_in, kappa_s=params.kappa_s,
                             bound=bound, mode=params.mode,
                             native_tol=params.prox_native_tol,
                             max_inner=params.prox_max_inner)
        engine = px.make_engine(reg, query, rng)
        outcome = px.run_prox_with_early_stop(engine, query, h_fun)
        stats.iters += 1
        stats.prox_calls += 1
        stats.prox_iters += outcome.inner_iters
        if outcome.stop_reason == px.STOP_FAILURE:
            failures += 1
            sigma_in *= params.gamma1
            if failures >= _MAX_CONSECUTIVE_PROX_FAILURES:
                break
            continue
        failures = 0
        if outcome.stop_reason == px.STOP_EARLY_NORM and bound > 0.0:
            margin = float(np.linalg.norm(outcome.shat)) / (params.kappa_s * bound)
            stats.early_margin_min = min(stats.early_margin_min, margin)
        u = outcome.shat
        measure = float(np.linalg.norm(u)) / nu_in
        if measure <= inner_tol:
            break
        m_new = mval(s + u)
        denom = outcome.xi_hat  # zero inner curvature: model decrease == xi
        if denom > 0.0 and math.isfinite(m_new):
            rho_in = (m_s - m_new) / denom
        else:
            rho_in = -math.inf
        if rho_in >= params.eta1_hat:
            s = s + u
            m_s = m_new
            if m_new < best_m:
                best_s, best_m = s, m_new
        sigma_in = sigma_update(sigma_in, rho_in, params)

    return best_s, stats


# ---------------------------------------------------------------------------
# Outer solver
# ---------------------------------------------------------------------------


def ir2n_solve(oracle, reg: Regularizer, x0: np.ndarray, params: SolverParams,
               hessian=None, prec_schedule: PrecSchedule | None = None,
               rng: np.random.Generator | None = None) -> SolveResult:
    """Minimize ``f + h`` with inexact evaluations and proximal operators.

    ``oracle`` provides ``eval(x, prec)`` and ``grad(x, prec)``; when its
    ``exact`` flag is set the requested precision is pinned internally.  When
    a ``prec_schedule`` is given, the requested precision tightens on every
    unsuccessful iteration.  Returns the final iterate, a termination status
    (first_order / max_iter / prox_failure) and the full per-iteration trace.
    """
    x = np.asarray(x0, dtype=float).copy()
    h_x = reg_value(x, reg)
    if not math.isfinite(h_x):
        raise ValueError("x0 is infeasible for the regularizer (h(x0) = inf)")
    if hessian is None:
        hessian = ZeroHessian()
    if rng is None:
        rng = np.random.default_rng(0)

    sigma = params.sigma0
    trace: list[IterationRecord] = []
    status = STATUS_MAX_ITER
    consecutive_prox_failures = 0
    pending_pair: tuple[np.ndarray, np.ndarray] | None = None  # (s, g_old)
    h_fun = lambda y: reg_value(y, reg)
    f_x: float | None = None
    g: np.ndarray | None = None
    last_prec: float | None = None

    for k in range(params.max_iter):
        prec = prec_schedule.value() if prec_schedule is not None else 1e-14
        if prec != last_prec:
            f_x = None
            g = None
            last_prec = prec
        if f_x is None:
            f_x = oracle.eval(x, prec)
        if g is None:
            g = oracle.grad(x, prec)
        if not math.isfinite(f_x) or not np.all(np.isfinite(g)):
            raise OracleError(f"non-finite objective or gradient at iteration {k}")
        if pending_pair is not None:
            s_prev, g_prev = pending_pair
            hessian_update(hessian, s_prev, g - g_prev)
            pending_pair = None
        sigma_k = sigma
        f_k = f_x
        h_k = h_x

        nu = nu_from_sigma(params.theta1, hessian, sigma_k)
        gnorm = float(np.linalg.norm(g))
        bound = step_norm_bound(reg, BoundInputs(x=x, nu=nu, ghat_norm=gnorm))
        query = px.ProxQuery(x=x, ghat=g, nu=nu, kappa_s=params.kappa_s, bound=bound,
                             mode=params.mode, native_tol=params.prox_native_tol,
                             max_inner=params.prox_max_inner)
        engine = px.make_engine(reg, query, rng)
        outcome = px.run_prox_with_early_stop(engine, query, h_fun)

        if outcome.stop_reason == px.STOP_FAILURE:
            consecutive_prox_failures += 1
            sigma = sigma_update(sigma, -math.inf, params)
            if prec_schedule is not None:
                prec_schedule.record_failure()
            trace.append(IterationRecord(
                k=k, f=f_k, h=h_k, xi_cp=math.nan, nu=nu, sigma=sigma_k, rho=-math.inf,
                status=UNSUCCESSFUL, s_norm=0.0, shat_norm=0.0,
                cauchy_prox_iters=outcome.inner_iters,
                cauchy_stop_reason=outcome.stop_reason, inner_iters=0,
                inner_prox_calls=0, inner_prox_iters=0, prec=prec,
                measure=math.nan, bound=bound, model_at_s=math.nan,
                model_at_shat=math.nan, inner_early_margin_min=math.inf))
            if consecutive_prox_failures >= _MAX_CONSECUTIVE_PROX_FAILURES:
                status = STATUS_PROX_FAILURE
                break
            continue
        consecutive_prox_failures = 0

        shat = outcome.shat
        shat_norm = float(np.linalg.norm(shat))
        measure = shat_norm / nu
        if measure <= params.epsilon:
            status = STATUS_FIRST_ORDER
            trace.append(IterationRecord(
                k=k, f=f_k, h=h_k, xi_cp=outcome.xi_hat, nu=nu, sigma=sigma_k,
                rho=math.nan, status=CONVERGED, s_norm=0.0, shat_norm=shat_norm,
                cauchy_prox_iters=outcome.inner_iters,
                cauchy_stop_reason=outcome.stop_reason, inner_iters=0,
                inner_prox_calls=0, inner_prox_iters=0, prec=prec,
                measure=measure, bound=bound, model_at_s=math.nan,
                model_at_shat=math.nan, inner_early_margin_min=math.inf))
            break

        inner_tol = max(1e-10, params.kappa_inner * measure)
        s, inner = ir2_solve(g, hessian, sigma_k, reg, x, shat, params, inner_tol,
                             rng, h_fun=h_fun)
        s_norm = float(np.linalg.norm(s))
        if s_norm > params.theta2 * shat_norm:
            s = shat
            s_norm = shat_norm

        def model_value(step: np.ndarray) -> float:
            return (float(g @ step) + 0.5 * float(step @ hessian.matvec(step))
                    + 0.5 * sigma_k * float(step @ step) + reg_value(x + step, reg))

        m_s = model_value(s)
        m_shat = model_value(shat)

        x_trial = x + s
        h_trial = reg_value(x_trial, reg)
        try:
            f_trial = oracle.eval(x_trial, prec)
        except OracleError:
            f_trial = math.inf
        if math.isfinite(f_trial) and math.isfinite(h_trial):
            rho, _ = rho_hat(f_k, f_trial, h_k, h_trial, g, hessian, s)
        else:
            rho = -math.inf

        if rho >= params.eta2_hat:
            it_status = VERY_SUCCESSFUL
        elif rho >= params.eta1_hat:
            it_status = SUCCESSFUL
        else:
            it_status = UNSUCCESSFUL

        if rho >= params.eta1_hat:
            pending_pair = (s.copy(), g.copy())
            x = x_trial
            f_x = f_trial
            h_x = h_trial
            g = None  # gradient must be refreshed at the new iterate
        else:
            if prec_schedule is not None:
                prec_schedule.record_failure()

        sigma = sigma_update(sigma, rho, params)
        trace.append(IterationRecord(
            k=k, f=f_k, h=h_k, xi_cp=outcome.xi_hat, nu=nu, sigma=sigma_k, rho=rho,
            status=it_status, s_norm=s_norm, shat_norm=shat_norm,
            cauchy_prox_iters=outcome.inner_iters,
            cauchy_stop_reason=outcome.stop_reason, inner_iters=inner.iters,
            inner_prox_calls=inner.prox_calls, inner_prox_iters=inner.prox_iters,
            prec=prec, measure=measure, bound=bound, model_at_s=m_s,
            model_at_shat=m_shat, inner_early_margin_min=inner.early_margin_min))

    return SolveResult(x=x, status=status, trace=trace)
