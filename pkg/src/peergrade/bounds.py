"""Closed-form incentive bounds and the curves built from them.

All conditions are strict, so boolean checkers use strict comparisons.
Costs are in utility units; :func:`review_cost` converts reviewing minutes
with a linear cost model (default weight 3/4 per hour: the homework-time
substitution of the classroom example).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "InfeasibleTargetError",
    "NoIncentiveError",
    "DegenerateParameterError",
    "PBound",
    "GammaInterval",
    "review_cost",
    "min_p_for_truthfulness",
    "deviation_bound_p",
    "convergence_errors",
    "best_response_grades",
    "tree_honesty_condition",
    "tree_cost_bound",
    "max_grade_punishment",
    "variance_lower_bound",
    "gamma_range",
    "min_p_curve",
    "variance_bound_curves",
    "write_curve_csv",
]

DEFAULT_COST_WEIGHT = 0.75


class InfeasibleTargetError(ValueError):
    """Truthfulness target sigma = 0 cannot be enforced with finite p."""


class NoIncentiveError(ValueError):
    """Guessed grade equals the true quality: no deviation incentive exists."""


class DegenerateParameterError(ValueError):
    pass


@dataclass(frozen=True)
class PBound:
    value: float

    @property
    def feasible(self) -> bool:
        """A probability bound is attainable only if it is below 1."""
        return self.value < 1.0

    def __float__(self):
        return self.value


def review_cost(minutes: float, weight: float = DEFAULT_COST_WEIGHT) -> float:
    """Utility cost of ``minutes`` of reviewing under ``C = weight * hours``."""
    return weight * minutes / 60.0


def min_p_for_truthfulness(C: float, alpha: float, sigma: float) -> PBound:
    """Instructor-grading probability above which every equilibrium is sigma-truthful."""
    if alpha <= 0 or C < 0:
        raise ValueError("need alpha > 0 and C >= 0")
    if sigma <= 0:
        raise InfeasibleTargetError("sigma must be > 0")
    return PBound(math.sqrt(C / (alpha * sigma * sigma)))


def deviation_bound_p(C: float, alpha: float, gap: float) -> PBound:
    """Probability above which a reviewer gains by reviewing instead of reporting a
    fixed grade ``gap`` away from the truth."""
    if alpha <= 0 or C < 0:
        raise ValueError("need alpha > 0 and C >= 0")
    if gap == 0:
        raise NoIncentiveError("guessed grade equals true quality; no incentive to review")
    return PBound(math.sqrt(C / (alpha * gap * gap)))


def best_response_grades(p: float, initial_gap: float, steps: int, q: float = 0.0) -> list[float]:
    """``g_t = q + (1-p)^(t-1) (D - q)`` for ``t = 1..steps``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return [q + (1 - p) ** (t - 1) * initial_gap for t in range(1, steps + 1)]


def convergence_errors(p: float, initial_gap: float, steps: int) -> list[float]:
    """Squared error ``e_t = (1-p)^(2(t-1)) (D-q)^2`` for ``t = 1..steps``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return [(1 - p) ** (2 * (t - 1)) * initial_gap ** 2 for t in range(1, steps + 1)]


def tree_honesty_condition(P: float, K: float, H: float, D: float) -> bool:
    """Honesty pays in a review tree iff ``P > K (H - D)``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    return P > K * (H - D)


def max_grade_punishment(sigma_q2: float, Eq: float, M: float) -> float:
    """``l_D - l_H = E(M - q)^2 = sigma_q^2 + (M - Eq)^2`` for max-grade defectors."""
    return sigma_q2 + (M - Eq) ** 2


def tree_cost_bound(sigma_q2: float, Eq: float, M: float, K: float) -> float:
    """Largest review cost for which a truthful tree reviewer beats a max-grader."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if Eq > M:
        raise ValueError("mean quality exceeds the maximum grade")
    return max_grade_punishment(sigma_q2, Eq, M) / K


def variance_lower_bound(C: float, Eq, M: float, K: float, clamp: bool = True):
    """Minimum quality variance keeping honest reviewing worthwhile: ``K C - (M - Eq)^2``.

    With ``clamp`` the vacuous negative part is reported as 0.
    """
    v = K * C - (M - np.asarray(Eq, dtype=float)) ** 2
    return np.maximum(v, 0.0) if clamp else v


@dataclass(frozen=True)
class GammaInterval:
    lo: float
    hi: float
    case: str

    @property
    def empty(self) -> bool:
        return not self.lo < self.hi

    def __contains__(self, gamma: float) -> bool:
        return self.lo < gamma < self.hi

    def __str__(self):
        return "empty" if self.empty else f"({self.lo:.6g}, {self.hi:.6g})"


def gamma_range(C: float, sigma_q2: float, eta2: float, n: int, rel_tol: float = 1e-12) -> GammaInterval:
    """Open interval of ``gamma`` for which truthful grading beats constant-plus-noise
    (variance ``eta2``) under the variance-penalized loss with review cost ``C``.

    Empty whenever ``C >= sigma_q2``.
    """
    if n < 2:
        raise DegenerateParameterError("need at least 2 reviews per student (n/(n-1) undefined)")
    if C < 0 or eta2 < 0 or sigma_q2 < 0:
        raise ValueError("C, eta2 and sigma_q2 must be >= 0")
    if C >= sigma_q2:
        return GammaInterval(0.0, 0.0, "cost_exceeds_variance")
    ratio = n / (n - 1)
    if math.isclose(eta2, sigma_q2, rel_tol=rel_tol, abs_tol=rel_tol):
        return GammaInterval(0.0, 1.0, "eta2_eq_sigma_q2")
    edge = (C - ratio * eta2) / (sigma_q2 - eta2)
    if eta2 < sigma_q2:
        return GammaInterval(max(0.0, edge), 1.0, "eta2_lt_sigma_q2")
    return GammaInterval(0.0, min(1.0, edge), "eta2_gt_sigma_q2")


# -- curves -----------------------------------------------------------------

def min_p_curve(minutes: Iterable[float], alpha: float = 0.25, sigma: float = 1.0,
               weight: float = DEFAULT_COST_WEIGHT) -> list[tuple[float, float]]:
    """Lower bound on instructor probability versus reviewing minutes."""
    return [(float(x), min_p_for_truthfulness(review_cost(x, weight), alpha, sigma).value)
            for x in minutes]


def variance_bound_curves(cost_minutes: Sequence[float], K: float = 5, M: float = 10.0,
                Eq_grid: Iterable[float] | None = None, weight: float = DEFAULT_COST_WEIGHT,
                clamp: bool = True) -> dict[float, list[tuple[float, float]]]:
    """Quality-variance lower bound versus mean quality, one curve per cost."""
    grid = np.linspace(0.0, M, 101) if Eq_grid is None else np.asarray(list(Eq_grid), float)
    out = {}
    for mins in cost_minutes:
        vals = variance_lower_bound(review_cost(mins, weight), grid, M, K, clamp)
        out[float(mins)] = [(float(e), float(v)) for e, v in zip(grid, vals)]
    return out


def write_curve_csv(path, rows: Iterable[tuple[float, float]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "value"])
        for x, v in rows:
            w.writerow([repr(float(x)), repr(float(v))])
    return path
