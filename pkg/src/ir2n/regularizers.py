"""Regularizers and computable bounds on exact Cauchy-step norms.

Three regularizer kinds are supported:

* ``LpNormReg``     -- ``h(x) = mu * ||x||_p`` with ``p >= 1``,
* ``TvpReg``        -- ``h(x) = mu * ||D x||_p`` with ``D`` the 1-D first-difference
  operator (rows ``(-1, 1)``),
* ``LpBallReg``     -- indicator of the nonconvex pseudo-norm ball
  ``{x : sum |x_i|^p <= r}`` with ``0 < p < 1``.

Each kind comes with a closed-form upper bound ``M`` on the norm of the exact
minimizer of the proximal (Cauchy) subproblem at the current point.  That bound
is what makes certified early termination of iterative prox evaluations
possible: any candidate step with norm at least ``kappa_s * M`` is at least a
``kappa_s`` fraction of every exact step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Slack when deciding membership in the lp pseudo-norm ball; absorbs the
# round-off of projections that land on the boundary.
FEASIBILITY_TOL = 1e-8


@dataclass(frozen=True)
class LpNormReg:
    """Weighted lp-norm regularizer ``mu * ||x||_p``, ``p >= 1``."""

    p: float
    mu: float

    def __post_init__(self):
        if not self.p >= 1.0:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if not self.mu >= 0.0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")


@dataclass(frozen=True)
class TvpReg:
    """Weighted 1-D total-variation regularizer ``mu * ||D x||_p``, ``p >= 1``.

    ``n`` is the ambient dimension; the difference operator has shape
    ``(n - 1, n)``.
    """

    p: float
    mu: float
    n: int

    def __post_init__(self):
        if not self.p >= 1.0:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if not self.mu >= 0.0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.n < 2:
            raise ValueError(f"n must be >= 2, got {self.n}")


@dataclass(frozen=True)
class LpBallReg:
    """Indicator of ``{x : sum |x_i|^p <= r}`` with ``0 < p < 1``.

    ``starts`` is the number of independent multi-start attempts used by the
    iteratively reweighted projection engine.
    """

    p: float
    r: float
    starts: int = 5

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"p must be in (0, 1), got {self.p}")
        if not self.r > 0.0:
            raise ValueError(f"r must be > 0, got {self.r}")
        if self.starts < 1:
            raise ValueError(f"starts must be >= 1, got {self.starts}")


Regularizer = LpNormReg | TvpReg | LpBallReg


@dataclass(frozen=True)
class BoundInputs:
    """Inputs of the step-norm bound: iterate, step length, gradient norm."""

    x: np.ndarray
    nu: float
    ghat_norm: float

    def __post_init__(self):
        if not self.nu > 0.0:
            raise ValueError(f"nu must be > 0, got {self.nu}")
        if not self.ghat_norm >= 0.0:
            raise ValueError(f"ghat_norm must be >= 0, got {self.ghat_norm}")


def lp_value(x: np.ndarray, reg: LpNormReg) -> float:
    """Value ``mu * (sum |x_i|^p)^(1/p)``."""
    x = np.asarray(x, dtype=float)
    if reg.mu == 0.0:
        return 0.0
    if reg.p == 1.0:
        return reg.mu * float(np.sum(np.abs(x)))
    if reg.p == 2.0:
        return reg.mu * float(np.linalg.norm(x))
    return reg.mu * float(np.sum(np.abs(x) ** reg.p) ** (1.0 / reg.p))


def tvp_value(x: np.ndarray, reg: TvpReg) -> float:
    """Value ``mu * ||D x||_p`` of the total-variation regularizer."""
    x = np.asarray(x, dtype=float)
    if x.shape != (reg.n,):
        raise ValueError(f"expected vector of length {reg.n}, got shape {x.shape}")
    d = np.diff(x)
    return lp_value(d, LpNormReg(p=reg.p, mu=reg.mu))


def lpball_value(x: np.ndarray, reg: LpBallReg) -> float:
    """Indicator value: 0 if ``sum |x_i|^p <= r`` (with slack), +inf otherwise."""
    x = np.asarray(x, dtype=float)
    if lpball_feasible(x, reg):
        return 0.0
    return math.inf


def lpball_feasible(x: np.ndarray, reg: LpBallReg, tol: float = FEASIBILITY_TOL) -> bool:
    return float(np.sum(np.abs(x) ** reg.p)) <= reg.r + tol


def reg_value(x: np.ndarray, reg: Regularizer) -> float:
    """Value h(x) for any regularizer kind."""
    if isinstance(reg, LpNormReg):
        return lp_value(x, reg)
    if isinstance(reg, TvpReg):
        return tvp_value(x, reg)
    if isinstance(reg, LpBallReg):
        return lpball_value(x, reg)
    raise TypeError(f"unknown regularizer kind: {type(reg)!r}")


def dual_subgradient_norm_factor(p: float, n: int) -> float:
    """Euclidean norm bound on unit dual-ball elements of the lp norm in R^n.

    Equals ``n**(1/p - 1/2)`` for ``1 <= p <= 2`` and 1 for ``p >= 2``; the two
    branches agree at ``p = 2``, so a single max-exponent formula is used.
    """
    return float(n) ** max(1.0 / p - 0.5, 0.0)


def diff_operator_norm(n: int) -> float:
    """Spectral norm of the (n-1) x n first-difference operator.

    ``D D^T`` is the tridiagonal second-difference matrix whose extreme
    eigenvalue is known in closed form.
    """
    return 2.0 * math.sin(math.pi * (n - 1) / (2.0 * n))


def step_norm_bound(reg: Regularizer, b: BoundInputs) -> float:
    """Upper bound M on the norm of every exact Cauchy (prox) step.

    For the weighted norm kinds the subgradient factor scales linearly with
    the weight mu, since mu enters the prox optimality conditions linearly.
    """
    if isinstance(reg, LpNormReg):
        n = int(np.asarray(b.x).size)
        return b.nu * (b.ghat_norm + reg.mu * dual_subgradient_norm_factor(reg.p, n))
    if isinstance(reg, TvpReg):
        factor = diff_operator_norm(reg.n) * dual_subgradient_norm_factor(reg.p, reg.n)
        return b.nu * (b.ghat_norm + reg.mu * factor)
    if isinstance(reg, LpBallReg):
        return reg.r ** (1.0 / reg.p) + float(np.linalg.norm(b.x))
    raise TypeError(f"unknown regularizer kind: {type(reg)!r}")
