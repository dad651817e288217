"""Discretized worst-case moment problems as linear programs.

The general worst case maximizes an expected reward over all distributions on
a grid subject to moment equalities.  This is the computational engine behind
the nonlinear interval calibrations and the independent check on the closed
forms in :mod:`shrinkci.worstcase`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linprog

from shrinkci.worstcase import DiscreteDistribution

__all__ = [
    "MomentProblem",
    "MomentLPResult",
    "InfeasibleMomentsError",
    "LPSolverError",
    "CalibrationError",
    "solve_moment_lp",
    "calibrate_chi",
    "default_squared_bias_grid",
]

# equality constraints are relaxed to this band to absorb floating-point drift
EQ_BAND = 1e-9


class InfeasibleMomentsError(ValueError):
    """No distribution on the grid matches the target moments."""


class LPSolverError(RuntimeError):
    """The LP solver failed for a reason other than infeasibility."""


class CalibrationError(RuntimeError):
    """The worst case stays above alpha over the whole search range."""


@dataclass(frozen=True)
class MomentProblem:
    """Maximize sum p_k * reward_k over probabilities p on a fixed grid,
    subject to sum p_k * g_j(x_k) = m_j for each moment function g_j.

    ``moments`` has shape (p, K) holding the moment-function evaluations on
    the grid; ``targets`` has shape (p,).
    """

    grid: np.ndarray
    reward: np.ndarray
    moments: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        reward = np.asarray(self.reward, dtype=float)
        moments = np.atleast_2d(np.asarray(self.moments, dtype=float))
        targets = np.atleast_1d(np.asarray(self.targets, dtype=float))
        if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be 1-d and strictly increasing")
        if reward.shape != grid.shape:
            raise ValueError("reward must match the grid")
        if np.any(reward < -1e-9) or np.any(reward > 1.0 + 1e-9):
            raise ValueError("reward values must lie in [0, 1]")
        if moments.shape[1] != grid.size or moments.shape[0] != targets.size:
            raise ValueError("moments must be (p, K) with p targets")
        if grid.size < targets.size + 2:
            raise ValueError("grid too small for the number of constraints")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "reward", np.clip(reward, 0.0, 1.0))
        object.__setattr__(self, "moments", moments)
        object.__setattr__(self, "targets", targets)


@dataclass(frozen=True)
class MomentLPResult:
    value: float
    solution: DiscreteDistribution
    dual_constant: float
    dual_moments: np.ndarray


def solve_moment_lp(problem: MomentProblem) -> MomentLPResult:
    """Solve the discretized worst-case problem.

    Uses the HiGHS dual simplex, so the returned distribution is a basic
    solution with at most p+1 strictly positive weights.  Moment equalities
    are relaxed to a +-1e-9 band.
    """
    K = problem.grid.size
    p = problem.targets.size
    A_ub = np.vstack([problem.moments, -problem.moments])
    b_ub = np.concatenate([problem.targets + EQ_BAND, -(problem.targets - EQ_BAND)])
    A_eq = np.ones((1, K))
    res = linprog(
        -problem.reward,
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A_eq,
        b_eq=[1.0],
        bounds=(0.0, None),
        method="highs-ds",
        options={
            "primal_feasibility_tolerance": 1e-10,
            "dual_feasibility_tolerance": 1e-10,
        },
    )
    if res.status == 2:
        raise InfeasibleMomentsError(
            f"no grid distribution matches the target moments {problem.targets}"
        )
    if res.status != 0:
        raise LPSolverError(f"LP solver failed (status {res.status}): {res.message}")
    weights = np.asarray(res.x)
    # weights at the scale of the equality band are artifacts of the relaxation
    keep = weights > 1e-9
    pts = problem.grid[keep]
    pr = weights[keep]
    pr = pr / pr.sum()
    # dual certificate: marginals of the band rows combine into one
    # multiplier per moment, the equality marginal is the constant
    ub_marg = np.asarray(res.ineqlin.marginals)
    dual_moments = -(ub_marg[:p] - ub_marg[p:])
    dual_constant = -float(res.eqlin.marginals[0])
    return MomentLPResult(
        value=float(-res.fun),
        solution=DiscreteDistribution(tuple(pts), tuple(pr)),
        dual_constant=dual_constant,
        dual_moments=dual_moments,
    )


def calibrate_chi(
    family: Callable[[float], MomentProblem],
    alpha: float,
    lo: float = 0.0,
    hi: float = 1.0,
    tol: float = 1e-4,
    max_doublings: int = 40,
) -> float:
    """Smallest chi (to within tol) whose worst case is at most alpha.

    ``family`` maps a candidate chi to the discretized problem for that chi;
    the caller guarantees the worst-case value is nonincreasing in chi.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    value = lambda chi: solve_moment_lp(family(chi)).value
    if value(lo) <= alpha:
        return lo
    for _ in range(max_doublings):
        if value(hi) <= alpha:
            break
        lo = hi
        hi *= 2.0
    else:
        raise CalibrationError(
            f"worst case exceeds alpha={alpha} up to chi={hi}; calibration failed"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if value(mid) <= alpha:
            hi = mid
        else:
            lo = mid
    return hi


def default_squared_bias_grid(m2: float, t0: float, size: int = 1000) -> np.ndarray:
    """Default grid for worst-case problems on the squared-bias scale.

    Log-spaced points resolve the region near zero, linear points the bulk;
    the range covers the chord kink and the point-mass solution comfortably.
    """
    upper = max(10.0 * m2, 2.0 * t0, 100.0)
    half = size // 2
    log_part = np.geomspace(max(upper * 1e-8, 1e-10), upper, half)
    lin_part = np.linspace(0.0, upper, size - half)
    return np.unique(np.concatenate([[0.0], log_part, lin_part]))
