"""Benchmark problem generators and their smooth oracles.

Three problems:

* sparse recovery (basis pursuit denoising): least squares with a matrix of
  orthonormal rows, regularized by a weighted lp norm;
* matrix completion of a fixed synthetic image observed through a random
  pixel mask, regularized by 1-D total variation of the vectorized image;
* FitzHugh-Nagumo parameter recovery: an ODE-constrained nonlinear least
  squares whose objective/gradient accuracy is controlled by the integrator
  tolerance, with gradients from forward sensitivity equations.

All generators are pure functions of their seed and parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .solver import OracleError

# ---------------------------------------------------------------------------
# Sparse recovery (BPDN)
# ---------------------------------------------------------------------------

BPDN_ROWS = 200
BPDN_COLS = 512
BPDN_NNZ = 10


@dataclass
class BpdnProblem:
    A: np.ndarray
    b: np.ndarray
    x_true: np.ndarray
    seed: int


def bpdn_generate(seed: int, noise_scale: float = 1.0) -> BpdnProblem:
    """Random sensing matrix with orthonormal rows, sparse sign vector target.

    ``b = A x_true + noise_scale * eps`` with standard normal ``eps``.  The
    literal unit noise of the problem statement is unusually large relative to
    the signal; ``noise_scale`` makes the level explicit.
    """
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((BPDN_COLS, BPDN_ROWS))
    Q, _ = np.linalg.qr(G)
    A = Q.T.copy()
    support = rng.choice(BPDN_COLS, size=BPDN_NNZ, replace=False)
    x_true = np.zeros(BPDN_COLS)
    x_true[support] = rng.choice([-1.0, 1.0], size=BPDN_NNZ)
    b = A @ x_true + noise_scale * rng.standard_normal(BPDN_ROWS)
    return BpdnProblem(A=A, b=b, x_true=x_true, seed=seed)


class LeastSquaresOracle:
    """Exact oracle for ``f(x) = 0.5 ||A x - b||^2``; ``prec`` is ignored."""

    exact = True

    def __init__(self, A: np.ndarray, b: np.ndarray):
        self.A = A
        self.b = b
        self.eval_count = 0
        self.grad_count = 0

    def eval(self, x: np.ndarray, prec: float = 0.0) -> float:
        self.eval_count += 1
        r = self.A @ x - self.b
        return 0.5 * float(r @ r)

    def grad(self, x: np.ndarray, prec: float = 0.0) -> np.ndarray:
        self.grad_count += 1
        return self.A.T @ (self.A @ x - self.b)


def bpdn_oracle(problem: BpdnProblem) -> LeastSquaresOracle:
    return LeastSquaresOracle(problem.A, problem.b)


# ---------------------------------------------------------------------------
# Matrix completion
# ---------------------------------------------------------------------------

MATCOMP_SHAPE = (10, 12)


@dataclass
class MatCompProblem:
    A_img: np.ndarray
    mask: np.ndarray
    seed: int

    @property
    def n(self) -> int:
        return self.A_img.size


def matcomp_generate(seed: int, sampling_rate: float = 0.8) -> MatCompProblem:
    """Fixed smooth image plus a seeded observation mask.

    The image is ``sin(pi*i/9) * cos(pi*j/11)`` on the 10x12 grid; the mask
    keeps each pixel independently with probability ``sampling_rate``.
    """
    if not 0.0 < sampling_rate <= 1.0:
        raise ValueError("sampling_rate must lie in (0, 1]")
    rows, cols = MATCOMP_SHAPE
    i = np.arange(rows)[:, None]
    j = np.arange(cols)[None, :]
    A_img = np.sin(np.pi * i / (rows - 1)) * np.cos(np.pi * j / (cols - 1))
    rng = np.random.default_rng(seed)
    mask = rng.random(MATCOMP_SHAPE) < sampling_rate
    return MatCompProblem(A_img=A_img, mask=mask, seed=seed)


class MaskedImageOracle:
    """Exact oracle for ``f(x) = 0.5 ||P(x - A)||_F^2`` on vectorized images.

    Vectorization is column-major so the 1-D total-variation regularizer sees
    the image as one length-120 signal.
    """

    exact = True

    def __init__(self, problem: MatCompProblem):
        self.target = problem.A_img.flatten(order="F")
        self.mask = problem.mask.flatten(order="F").astype(float)
        self.eval_count = 0
        self.grad_count = 0

    def eval(self, x: np.ndarray, prec: float = 0.0) -> float:
        self.eval_count += 1
        r = self.mask * (x - self.target)
        return 0.5 * float(r @ r)

    def grad(self, x: np.ndarray, prec: float = 0.0) -> np.ndarray:
        self.grad_count += 1
        return self.mask * (x - self.target)


def matcomp_oracle(problem: MatCompProblem) -> MaskedImageOracle:
    return MaskedImageOracle(problem)


# ---------------------------------------------------------------------------
# FitzHugh-Nagumo inverse problem
# ---------------------------------------------------------------------------

FH_X_TRUE = np.array([0.0, 0.2, 1.0, 0.0, 0.0])
FH_STATE0 = np.array([2.0, 0.0])
_X2_MIN = 1e-6

# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = np.zeros((7, 7))
_DP_A[1, 0] = 1 / 5
_DP_A[2, :2] = (3 / 40, 9 / 40)
_DP_A[3, :3] = (44 / 45, -56 / 15, 32 / 9)
_DP_A[4, :4] = (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729)
_DP_A[5, :5] = (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656)
_DP_A[6, :6] = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)
_DP_B5 = _DP_A[6].copy()
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200,
                  22 / 525, -1 / 40])

_ERR_OK = 0
_ERR_UNDERFLOW = 1
_ERR_MAXSTEPS = 2


@njit(cache=True)
def _fh_rhs(y, x, with_sens, out):
    """FitzHugh-Nagumo right-hand side, optionally with forward sensitivities.

    State layout: ``y[0]=V, y[1]=W``; with sensitivities, ``y[2+j]`` and
    ``y[7+j]`` hold dV/dx_j and dW/dx_j for the five parameters.
    """
    x1, x2, x3, x4, x5 = x[0], x[1], x[2], x[3], x[4]
    V = y[0]
    W = y[1]
    fV = (V - V * V * V / 3.0 - W + x1) / x2
    fW = x2 * (x3 * V - x4 * W + x5)
    out[0] = fV
    out[1] = fW
    if with_sens:
        jVV = (1.0 - V * V) / x2
        jVW = -1.0 / x2
        jWV = x2 * x3
        jWW = -x2 * x4
        for j in range(5):
            sV = y[2 + j]
            sW = y[7 + j]
            if j == 0:
                pV = 1.0 / x2
                pW = 0.0
            elif j == 1:
                pV = -fV / x2
                pW = x3 * V - x4 * W + x5
            elif j == 2:
                pV = 0.0
                pW = x2 * V
            elif j == 3:
                pV = 0.0
                pW = -x2 * W
            else:
                pV = 0.0
                pW = x2
            out[2 + j] = jVV * sV + jVW * sW + pV
            out[7 + j] = jWV * sV + jWW * sW + pW


@njit(cache=True)
def _dp54_solve(x, t_grid, y0, rtol, atol, with_sens, a, b5, e, max_steps):
    """Adaptive Dormand-Prince 5(4) integration sampled at the grid points.

    Returns ``(samples, status)`` where samples has one row per grid point.
    FSAL is exploited; the error norm is the RMS of component errors scaled by
    ``atol + rtol * max(|y|, |y_new|)``.
    """
    n_pts = t_grid.shape[0]
    dim = y0.shape[0]
    out = np.zeros((n_pts, dim))
    out[0] = y0
    y = y0.copy()
    t = t_grid[0]
    k = np.zeros((7, dim))
    ytmp = np.empty(dim)
    y_new = np.empty(dim)
    _fh_rhs(y, x, with_sens, k[0])
    # initial step heuristic
    d0 = 0.0
    d1 = 0.0
    for i in range(dim):
        sc = atol + rtol * abs(y[i])
        d0 += (y[i] / sc) ** 2
        d1 += (k[0, i] / sc) ** 2
    d0 = math.sqrt(d0 / dim)
    d1 = math.sqrt(d1 / dim)
    if d1 > 1e-12:
        h = 0.01 * d0 / d1
    else:
        h = 1e-4
    span = t_grid[n_pts - 1] - t_grid[0]
    if h <= 0.0 or h > 0.1 * span:
        h = 0.1 * span
    steps = 0
    for ip in range(1, n_pts):
        t_target = t_grid[ip]
        while t < t_target:
            if steps >= max_steps:
                return out, _ERR_MAXSTEPS
            h_use = h
            hit_grid = False
            if t + h_use >= t_target:
                h_use = t_target - t
                hit_grid = True
            if h_use < 1e-14 * max(abs(t), 1.0):
                return out, _ERR_UNDERFLOW
            # stages (k[0] is FSAL-carried)
            for st in range(1, 7):
                for i in range(dim):
                    acc = y[i]
                    for prev in range(st):
                        aa = a[st, prev]
                        if aa != 0.0:
                            acc += h_use * aa * k[prev, i]
                    ytmp[i] = acc
                _fh_rhs(ytmp, x, with_sens, k[st])
            for i in range(dim):
                acc = y[i]
                for st in range(7):
                    bb = b5[st]
                    if bb != 0.0:
                        acc += h_use * bb * k[st, i]
                y_new[i] = acc
            err = 0.0
            for i in range(dim):
                ei = 0.0
                for st in range(7):
                    ee = e[st]
                    if ee != 0.0:
                        ei += ee * k[st, i]
                ei *= h_use
                sc = atol + rtol * max(abs(y[i]), abs(y_new[i]))
                err += (ei / sc) ** 2
            err = math.sqrt(err / dim)
            steps += 1
            if not math.isfinite(err):
                return out, _ERR_UNDERFLOW
            if err <= 1.0:
                t = t_target if hit_grid else t + h_use
                for i in range(dim):
                    y[i] = y_new[i]
                    k[0, i] = k[6, i]  # FSAL
                if not hit_grid:
                    fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
                    h = h_use * fac
            else:
                h = h_use * max(0.2, 0.9 * err ** -0.2)
        out[ip] = y
    return out, _ERR_OK


@dataclass
class FhProblem:
    """Data-fitting problem for the two-state neuron model."""

    t_grid: np.ndarray
    v_data: np.ndarray
    w_data: np.ndarray
    seed: int
    noise_scale: float
    x_true: np.ndarray = field(default_factory=lambda: FH_X_TRUE.copy())

    @property
    def n_points(self) -> int:
        return self.t_grid.size


def fh_simulate(x: np.ndarray, prec: float, t_grid: np.ndarray,
                with_sensitivities: bool = False) -> np.ndarray:
    """Integrate the model (optionally with sensitivities) over the grid.

    Returns an array of shape ``(len(t_grid), 2)`` or ``(len(t_grid), 12)``.
    Raises ``OracleError`` for a degenerate time constant or integrator
    breakdown.
    """
    x = np.asarray(x, dtype=float)
    if abs(x[1]) < _X2_MIN:
        raise OracleError(f"time-constant parameter too small: x2 = {x[1]:.3e}")
    dim = 12 if with_sensitivities else 2
    y0 = np.zeros(dim)
    y0[:2] = FH_STATE0
    out, status = _dp54_solve(x, np.asarray(t_grid, dtype=float), y0, prec, prec,
                              with_sensitivities, _DP_A, _DP_B5, _DP_E, 2_000_000)
    if status == _ERR_UNDERFLOW:
        raise OracleError("integrator step size underflow (stiff or degenerate run)")
    if status == _ERR_MAXSTEPS:
        raise OracleError("integrator exceeded the step budget")
    if not np.all(np.isfinite(out)):
        raise OracleError("integrator produced non-finite states")
    return out


def fh_generate(seed: int, n_points: int = 101, t_end: float = 20.0,
                noise_scale: float = 0.1, data_prec: float = 1e-14) -> FhProblem:
    """Sample the true-parameter trajectory and add Gaussian noise."""
    t_grid = np.linspace(0.0, t_end, n_points)
    traj = fh_simulate(FH_X_TRUE, data_prec, t_grid)
    rng = np.random.default_rng(seed)
    v_data = traj[:, 0] + noise_scale * rng.standard_normal(n_points)
    w_data = traj[:, 1] + noise_scale * rng.standard_normal(n_points)
    return FhProblem(t_grid=t_grid, v_data=v_data, w_data=w_data, seed=seed,
                     noise_scale=noise_scale)


class FhOracle:
    """ODE-constrained least-squares oracle with adjustable accuracy.

    ``eval`` integrates the two states; ``grad`` integrates the ten forward
    sensitivity equations alongside and returns ``J(x)' F(x)``.  With
    ``exact=True`` the requested precision is pinned to 1e-14.
    """

    PREC_EXACT = 1e-14

    def __init__(self, problem: FhProblem, exact: bool = True):
        self.problem = problem
        self.exact = exact
        self.eval_counts: dict[float, int] = {}
        self.grad_counts: dict[float, int] = {}

    def _prec(self, prec: float) -> float:
        return self.PREC_EXACT if self.exact else float(prec)

    def residual(self, x: np.ndarray, prec: float) -> np.ndarray:
        traj = fh_simulate(x, self._prec(prec), self.problem.t_grid)
        return np.concatenate([traj[:, 0] - self.problem.v_data,
                               traj[:, 1] - self.problem.w_data])

    def eval(self, x: np.ndarray, prec: float) -> float:
        p = self._prec(prec)
        self.eval_counts[p] = self.eval_counts.get(p, 0) + 1
        F = self.residual(x, prec)
        return 0.5 * float(F @ F)

    def grad(self, x: np.ndarray, prec: float) -> np.ndarray:
        p = self._prec(prec)
        self.grad_counts[p] = self.grad_counts.get(p, 0) + 1
        traj = fh_simulate(x, p, self.problem.t_grid, with_sensitivities=True)
        rv = traj[:, 0] - self.problem.v_data
        rw = traj[:, 1] - self.problem.w_data
        g = np.empty(5)
        for j in range(5):
            g[j] = float(rv @ traj[:, 2 + j]) + float(rw @ traj[:, 7 + j])
        return g


def fh_objective_oracle(problem: FhProblem, exact: bool = True) -> FhOracle:
    return FhOracle(problem, exact=exact)
