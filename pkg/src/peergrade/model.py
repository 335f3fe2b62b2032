"""Core domain types: strategies, quality distributions and grade graphs.

A grading strategy maps a perceived quality ``q + eps`` through a
piecewise-linear quality map ``f`` and adds voluntary noise ``xi``.  The
realized grade is always clipped to ``[0, M]``.

Noise is generated from standard-normal base draws so that different
strategies can be evaluated on common random numbers (paired sampling):
gaussian noise uses the base draw directly, uniform noise maps it through the
normal CDF to a zero-mean, unit-variance uniform variable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
from scipy import integrate
from scipy.special import ndtr

__all__ = [
    "ConfigurationError",
    "NoiseShape",
    "Strategy",
    "StrategyProfile",
    "QualityDistribution",
    "GradeGraph",
    "SigmaTruthfulness",
    "sample_grade",
    "realize_graph",
    "is_sigma_truthful",
    "grade_moments",
]

SQRT3 = math.sqrt(3.0)


class ConfigurationError(ValueError):
    """Raised when a scenario references missing qualities or strategies."""


class NoiseShape(str, Enum):
    GAUSSIAN_CLIPPED = "gaussian_clipped"
    UNIFORM_CLIPPED = "uniform_clipped"
    NONE = "none"


def _standardize(z: np.ndarray, shape: NoiseShape) -> np.ndarray:
    if shape is NoiseShape.GAUSSIAN_CLIPPED:
        return z
    if shape is NoiseShape.UNIFORM_CLIPPED:
        return SQRT3 * (2.0 * ndtr(z) - 1.0)
    return np.zeros_like(z)


@dataclass(frozen=True)
class Strategy:
    """Admissible grading strategy ``(f, e, v)`` plus measurement noise.

    ``quality_map`` holds breakpoints ``(x, y)`` with strictly increasing
    ``x``.  Between breakpoints ``f`` is linear; outside them the end
    segments are extended linearly, and a single breakpoint means a
    constant map.  So ``((0, 0), (1, 1))`` is the identity on any scale.
    """

    quality_map: tuple[tuple[float, float], ...] = ((0.0, 0.0), (1.0, 1.0))
    measurement_noise_std: float = 0.0
    voluntary_noise_mean: float = 0.0
    voluntary_noise_std: float = 0.0
    noise_shape: NoiseShape = NoiseShape.GAUSSIAN_CLIPPED
    name: str | None = field(default=None, compare=False)

    def __post_init__(self):
        bp = tuple((float(x), float(y)) for x, y in self.quality_map)
        if not bp:
            raise ValueError("quality_map needs at least one breakpoint")
        xs = [x for x, _ in bp]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("quality_map abscissae must be strictly increasing")
        if self.measurement_noise_std < 0 or self.voluntary_noise_std < 0:
            raise ValueError("noise standard deviations must be >= 0")
        object.__setattr__(self, "quality_map", bp)
        object.__setattr__(self, "noise_shape", NoiseShape(self.noise_shape))

    # -- constructors -----------------------------------------------------
    @classmethod
    def truthful(cls) -> "Strategy":
        return cls(name="truthful")

    @classmethod
    def constant(cls, value: float, noise_std: float = 0.0, **kw) -> "Strategy":
        return cls(quality_map=((0.0, value),), voluntary_noise_std=noise_std,
                   name=kw.pop("name", f"constant({value:g})"), **kw)

    @classmethod
    def affine(cls, slope: float, intercept: float, **kw) -> "Strategy":
        return cls(quality_map=((0.0, intercept), (1.0, intercept + slope)),
                   name=kw.pop("name", f"affine({slope:g},{intercept:g})"), **kw)

    @classmethod
    def truthful_plus_noise(cls, bias: float = 0.0, std: float = 0.0, **kw) -> "Strategy":
        return cls(voluntary_noise_mean=bias, voluntary_noise_std=std,
                   name=kw.pop("name", f"truthful+noise({bias:g},{std:g})"), **kw)

    # -- properties -------------------------------------------------------
    @property
    def is_constant(self) -> bool:
        ys = [y for _, y in self.quality_map]
        return all(y == ys[0] for y in ys)

    @property
    def requires_measurement(self) -> bool:
        """A strategy needs to look at the submission iff ``f`` is non-constant."""
        return not self.is_constant

    @property
    def is_affine(self) -> bool:
        return len(self.quality_map) <= 2

    @property
    def slope_intercept(self) -> tuple[float, float]:
        if not self.is_affine:
            raise ValueError("quality map is not affine")
        if len(self.quality_map) == 1:
            return 0.0, self.quality_map[0][1]
        (x0, y0), (x1, y1) = self.quality_map
        a = (y1 - y0) / (x1 - x0)
        return a, y0 - a * x0

    @property
    def is_truthful(self) -> bool:
        return (self.is_affine and self.slope_intercept == (1.0, 0.0)
                and self.measurement_noise_std == 0 and self.voluntary_noise_mean == 0
                and (self.voluntary_noise_std == 0 or self.noise_shape is NoiseShape.NONE))

    @property
    def is_deterministic(self) -> bool:
        return self.noise_shape is NoiseShape.NONE or (
            self.measurement_noise_std == 0 and self.voluntary_noise_std == 0)

    def label(self) -> str:
        if self.name:
            return self.name
        return (f"pl{list(self.quality_map)}|eps={self.measurement_noise_std:g}"
                f"|e={self.voluntary_noise_mean:g}|v={self.voluntary_noise_std:g}")

    def validate(self, max_grade: float) -> None:
        for _, y in self.quality_map:
            if not 0.0 <= y <= max_grade:
                raise ValueError(f"quality_map value {y} outside [0, {max_grade}]")

    # -- evaluation -------------------------------------------------------
    def apply_map(self, x):
        x = np.asarray(x, dtype=float)
        bp = self.quality_map
        if len(bp) == 1:
            return np.full_like(x, bp[0][1])
        xs = np.array([b[0] for b in bp])
        ys = np.array([b[1] for b in bp])
        seg = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
        x0, x1, y0, y1 = xs[seg], xs[seg + 1], ys[seg], ys[seg + 1]
        return y0 + (y1 - y0) * (x - x0) / (x1 - x0)

    def transform(self, q, z_eps, z_xi, max_grade: float):
        """Grades from qualities and standard-normal base draws (broadcasting)."""
        eps = self.measurement_noise_std * _standardize(np.asarray(z_eps, float), self.noise_shape)
        xi = self.voluntary_noise_std * _standardize(np.asarray(z_xi, float), self.noise_shape)
        g = self.apply_map(np.asarray(q, float) + eps) + self.voluntary_noise_mean + xi
        return np.clip(g, 0.0, max_grade)

    def to_dict(self) -> dict:
        return {
            "quality_map": [list(b) for b in self.quality_map],
            "measurement_noise_std": self.measurement_noise_std,
            "voluntary_noise_mean": self.voluntary_noise_mean,
            "voluntary_noise_std": self.voluntary_noise_std,
            "noise_shape": self.noise_shape.value,
        }


def sample_grade(strategy: Strategy, q: float, rng: np.random.Generator,
                 max_grade: float = 10.0, size: int | None = None):
    """Realized grade ``clip(f(q + eps) + xi, 0, M)``; an array if ``size`` is given."""
    if not 0.0 <= q <= max_grade:
        raise ValueError(f"quality {q} outside [0, {max_grade}]")
    if size is None:
        z = rng.standard_normal(2)
        return float(strategy.transform(q, z[0], z[1], max_grade))
    z = rng.standard_normal((2, size))
    return strategy.transform(q, z[0], z[1], max_grade)


@dataclass(frozen=True)
class StrategyProfile:
    default: Strategy
    overrides: Mapping[Hashable, Strategy] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "overrides", dict(self.overrides))

    def strategy_for(self, student) -> Strategy:
        return self.overrides.get(student, self.default)

    def with_override(self, student, strategy: Strategy) -> "StrategyProfile":
        return StrategyProfile(self.default, {**self.overrides, student: strategy})

    @classmethod
    def symmetric(cls, strategy: Strategy) -> "StrategyProfile":
        return cls(strategy)


@dataclass(frozen=True)
class QualityDistribution:
    """Distribution of true submission qualities, supported in ``[0, M]``.

    ``gaussian_clipped`` samples are clipped to ``[lo, hi]`` (default
    ``[0, M]`` at sampling time), which puts point masses at the bounds.
    """

    kind: str
    params: tuple = ()

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "QualityDistribution":
        if lo > hi:
            raise ValueError("uniform needs lo <= hi")
        return cls("uniform", (float(lo), float(hi)))

    @classmethod
    def gaussian_clipped(cls, mean: float, std: float) -> "QualityDistribution":
        if std < 0:
            raise ValueError("std must be >= 0")
        return cls("gaussian_clipped", (float(mean), float(std)))

    @classmethod
    def discrete(cls, values: Sequence[float], probs: Sequence[float]) -> "QualityDistribution":
        if len(values) != len(probs) or not values:
            raise ValueError("values and probs must be non-empty and equally long")
        if any(p < 0 for p in probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
            raise ValueError("probabilities must be non-negative and sum to 1")
        return cls("discrete", (tuple(map(float, values)), tuple(map(float, probs))))

    def validate(self, max_grade: float) -> None:
        if self.kind == "uniform":
            lo, hi = self.params
            ok = 0 <= lo <= hi <= max_grade
        elif self.kind == "discrete":
            ok = all(0 <= v <= max_grade for v in self.params[0])
        elif self.kind == "gaussian_clipped":
            ok = True
        else:
            raise ValueError(f"unknown quality distribution {self.kind!r}")
        if not ok:
            raise ValueError(f"quality support outside [0, {max_grade}]")

    def sample(self, rng: np.random.Generator, size, max_grade: float) -> np.ndarray:
        if self.kind == "uniform":
            lo, hi = self.params
            return rng.uniform(lo, hi, size)
        if self.kind == "gaussian_clipped":
            mean, std = self.params
            return np.clip(mean + std * rng.standard_normal(size), 0.0, max_grade)
        if self.kind == "discrete":
            values, probs = self.params
            return np.asarray(values)[rng.choice(len(values), size=size, p=probs)]
        raise ValueError(f"unknown quality distribution {self.kind!r}")

    def moments(self, max_grade: float) -> tuple[float, float]:
        """Exact mean and variance of the (clipped) distribution."""
        if self.kind == "uniform":
            lo, hi = self.params
            return (lo + hi) / 2, (hi - lo) ** 2 / 12
        if self.kind == "discrete":
            v, p = map(np.asarray, self.params)
            mean = float(p @ v)
            return mean, float(p @ (v - mean) ** 2)
        mean, std = self.params
        m1, m2 = _censored_normal_moments(mean, std, 0.0, max_grade)
        return m1, max(m2 - m1 * m1, 0.0)

    def to_dict(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform", "lo": self.params[0], "hi": self.params[1]}
        if self.kind == "gaussian_clipped":
            return {"kind": "gaussian_clipped", "mean": self.params[0], "std": self.params[1]}
        return {"kind": "discrete", "values": list(self.params[0]), "probs": list(self.params[1])}


def _censored_normal_moments(mu: float, tau: float, lo: float, hi: float) -> tuple[float, float]:
    """E[Y], E[Y^2] for ``Y = clip(X, lo, hi)``, ``X ~ N(mu, tau^2)``."""
    if tau == 0:
        y = min(max(mu, lo), hi)
        return y, y * y
    a, b = (lo - mu) / tau, (hi - mu) / tau
    Pa, Pb = float(ndtr(a)), float(ndtr(b))
    pa = math.exp(-a * a / 2) / math.sqrt(2 * math.pi)
    pb = math.exp(-b * b / 2) / math.sqrt(2 * math.pi)
    mid = Pb - Pa
    m1 = lo * Pa + hi * (1 - Pb) + mu * mid + tau * (pa - pb)
    m2 = (lo * lo * Pa + hi * hi * (1 - Pb) + (mu * mu + tau * tau) * mid
          + 2 * mu * tau * (pa - pb) + tau * tau * (a * pa - b * pb))
    return m1, m2


def grade_moments(strategy: Strategy, q: float, max_grade: float) -> tuple[float, float] | None:
    """Exact mean and variance of the clipped grade, or ``None`` if no closed form.

    Closed forms exist for deterministic strategies and for affine maps with
    gaussian noise (the grade is then a censored normal variable).
    """
    if strategy.is_deterministic:
        g = float(strategy.transform(q, 0.0, 0.0, max_grade))
        return g, 0.0
    if strategy.is_affine and strategy.noise_shape is NoiseShape.GAUSSIAN_CLIPPED:
        a, c = strategy.slope_intercept
        mu = a * q + c + strategy.voluntary_noise_mean
        tau = math.hypot(a * strategy.measurement_noise_std, strategy.voluntary_noise_std)
        m1, m2 = _censored_normal_moments(mu, tau, 0.0, max_grade)
        return m1, max(m2 - m1 * m1, 0.0)
    return None


@dataclass(frozen=True)
class SigmaTruthfulness:
    truthful: bool
    worst_error: float
    worst_quality: float
    std_error: float
    method: str


def is_sigma_truthful(strategy: Strategy, sigma: float, quality_grid: Iterable[float],
                      max_grade: float = 10.0, method: str = "auto",
                      samples: int = 100_000, seed: int = 0) -> SigmaTruthfulness:
    """Check ``b^2 + v^2 <= sigma^2`` at every grid quality.

    ``method="auto"`` uses the exact clipped moments where available and
    Monte Carlo (``samples`` draws per grid point) otherwise.
    """
    grid = [float(q) for q in quality_grid]
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if not grid or any(not 0 <= q <= max_grade for q in grid):
        raise ValueError("quality grid must be non-empty and inside [0, M]")
    if method not in ("auto", "exact", "monte_carlo"):
        raise ValueError(f"unknown method {method!r}")

    use_exact = method != "monte_carlo" and grade_moments(strategy, grid[0], max_grade) is not None
    if method == "exact" and not use_exact:
        raise ValueError("no closed form for this strategy")

    worst, worst_q, worst_se = -1.0, grid[0], 0.0
    rng = np.random.default_rng(seed)
    for q in grid:
        if use_exact:
            mean, var = grade_moments(strategy, q, max_grade)
            err, se = (mean - q) ** 2 + var, 0.0
        else:
            z = rng.standard_normal((2, samples))
            sq = (strategy.transform(q, z[0], z[1], max_grade) - q) ** 2
            err, se = float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(samples))
        if err > worst:
            worst, worst_q, worst_se = err, q, se
    return SigmaTruthfulness(worst <= sigma * sigma, worst, worst_q, worst_se,
                             "exact" if use_exact else "monte_carlo")


def expected_squared_error_quad(strategy: Strategy, q: float, max_grade: float) -> float:
    """Quadrature value of ``E(g - q)^2`` for gaussian strategies (test oracle)."""
    s1, s2 = strategy.measurement_noise_std, strategy.voluntary_noise_std
    phi = lambda z: math.exp(-z * z / 2) / math.sqrt(2 * math.pi)  # noqa: E731

    def integrand(z2, z1):
        g = float(strategy.transform(q, z1, z2, max_grade))
        return (g - q) ** 2 * phi(z1) * phi(z2)

    if s1 == 0 and s2 == 0:
        return float((strategy.transform(q, 0, 0, max_grade) - q) ** 2)
    val, _ = integrate.dblquad(integrand, -8, 8, -8, 8, epsabs=1e-10)
    return val


@dataclass(frozen=True)
class GradeGraph:
    """Labeled bipartite review graph.

    ``edges`` are ``(submission, student, grade)`` triples.  ``qualities``
    may be empty for user-supplied data; losses that need true qualities
    raise if one is missing.  ``owners`` maps a submission to its author and
    is used to forbid self-review.
    """

    max_grade: float
    edges: tuple[tuple[Hashable, Hashable, float], ...]
    qualities: Mapping[Hashable, float] = field(default_factory=dict)
    students: frozenset = frozenset()
    owners: Mapping[Hashable, Hashable] = field(default_factory=dict)

    def __post_init__(self):
        edges = tuple((i, u, float(g)) for i, u, g in self.edges)
        seen = set()
        by_student: dict = {}
        by_submission: dict = {}
        for i, u, g in edges:
            if (i, u) in seen:
                raise ValueError(f"duplicate review of {i!r} by {u!r}")
            seen.add((i, u))
            if not 0.0 <= g <= self.max_grade:
                raise ValueError(f"grade {g} outside [0, {self.max_grade}]")
            if self.owners.get(i, object()) == u:
                raise ValueError(f"student {u!r} reviews own submission {i!r}")
            by_student.setdefault(u, []).append(i)
            by_submission.setdefault(i, []).append(u)
        for i, q in self.qualities.items():
            if not 0.0 <= q <= self.max_grade:
                raise ValueError(f"quality {q} of {i!r} outside [0, {self.max_grade}]")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "qualities", dict(self.qualities))
        object.__setattr__(self, "owners", dict(self.owners))
        object.__setattr__(self, "students", frozenset(self.students) | frozenset(by_student))
        object.__setattr__(self, "_grade", {(i, u): g for i, u, g in edges})
        object.__setattr__(self, "_by_student", {u: tuple(v) for u, v in by_student.items()})
        object.__setattr__(self, "_by_submission", {i: tuple(v) for i, v in by_submission.items()})

    @property
    def submissions(self) -> frozenset:
        return frozenset(self._by_submission) | frozenset(self.qualities)

    def reviewed_by(self, u) -> tuple:
        """``∂u``: submissions graded by student ``u``."""
        return self._by_student.get(u, ())

    def reviewers_of(self, i) -> tuple:
        """``∂i``: students who graded submission ``i``."""
        return self._by_submission.get(i, ())

    def grade(self, i, u) -> float:
        return self._grade[(i, u)]

    def quality(self, i) -> float:
        try:
            return self.qualities[i]
        except KeyError:
            raise ConfigurationError(f"no true quality known for submission {i!r}") from None

    def grades(self) -> np.ndarray:
        return np.array([g for _, _, g in self.edges])


def realize_graph(assignment, qualities: Mapping[Hashable, float], profile: StrategyProfile,
                  seed: int, max_grade: float = 10.0, replicate: int = 0) -> GradeGraph:
    """Draw one grade per assigned ``(submission, student)`` pair.

    ``assignment`` is anything with ``edges`` (pairs) and optional ``owners``.
    Edges are visited in sorted order so the result depends only on the seed.
    """
    pairs = sorted(assignment.edges, key=lambda e: (repr(e[1]), repr(e[0])))
    missing = {i for i, _ in pairs if i not in qualities}
    if missing:
        raise ConfigurationError(f"missing qualities for submissions {sorted(map(repr, missing))}")
    if profile is None or profile.default is None:
        raise ConfigurationError("strategy profile has no default strategy")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate,)))
    z = rng.standard_normal((len(pairs), 2))
    edges = []
    for (i, u), (z1, z2) in zip(pairs, z):
        strat = profile.strategy_for(u)
        edges.append((i, u, float(strat.transform(qualities[i], z1, z2, max_grade))))
    return GradeGraph(max_grade, tuple(edges), dict(qualities),
                      owners=getattr(assignment, "owners", {}) or {})
