import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from peergrade.assignment import build_assignment
from peergrade.model import (
    ConfigurationError,
    GradeGraph,
    NoiseShape,
    QualityDistribution,
    Strategy,
    StrategyProfile,
    expected_squared_error_quad,
    grade_moments,
    is_sigma_truthful,
    realize_graph,
    sample_grade,
)

M = 10.0
GRID = np.linspace(0, M, 41)

noise_std = st.floats(0, 3)
strategies = st.one_of(
    st.builds(Strategy.truthful_plus_noise, st.floats(-3, 3), noise_std),
    st.builds(Strategy.constant, st.floats(0, M), noise_std),
    st.builds(Strategy.affine, st.floats(-2, 2), st.floats(-5, 15)),
    st.builds(lambda s, e, v, shape: Strategy(((0, 1), (5, 4), (10, 9)), s, e, v, shape),
              noise_std, st.floats(-2, 2), noise_std, st.sampled_from(list(NoiseShape))),
)


def test_truthful_zero_noise_grade_equals_quality(rng):
    assert sample_grade(Strategy.truthful(), 7.3, rng) == 7.3


def test_constant_strategy_grade(rng):
    assert sample_grade(Strategy.constant(4.0), 9.0, rng) == 4.0


def test_truthful_noise_clipped_into_range(rng):
    g = sample_grade(Strategy.truthful_plus_noise(0, 1), 9.9, rng, size=1_000_000)
    assert g.min() >= 0 and g.max() <= 10
    assert (g == 10).mean() > 0.4


def test_quality_outside_range_rejected(rng):
    with pytest.raises(ValueError):
        sample_grade(Strategy.truthful(), 10.5, rng)


def test_quality_map_must_increase():
    with pytest.raises(ValueError):
        Strategy(((1, 0), (1, 1)))


def test_piecewise_map_extrapolates_linearly():
    s = Strategy(((2, 3), (4, 7)))
    assert s.apply_map(6.0) == pytest.approx(11.0)
    assert s.apply_map(0.0) == pytest.approx(-1.0)


def test_uniform_noise_has_unit_variance(rng):
    s = Strategy(voluntary_noise_std=1.0, noise_shape="uniform_clipped")
    z = rng.standard_normal((2, 400_000))
    g = s.transform(5.0, z[0], z[1], 10.0) - 5.0
    assert abs(g.mean()) < 0.01
    assert g.var() == pytest.approx(1.0, abs=0.01)
    assert np.abs(g).max() <= math.sqrt(3) + 1e-12


@given(strategies, st.floats(0, M), st.integers(0, 2**32 - 1))
def test_grades_always_in_range(strategy, q, seed):
    g = sample_grade(strategy, q, np.random.default_rng(seed), M, size=200)
    assert np.all((g >= 0) & (g <= M))


@given(st.builds(Strategy.constant, st.floats(0, M)), st.floats(0, M))
def test_zero_noise_strategy_is_pure_function(strategy, q):
    a = sample_grade(strategy, q, np.random.default_rng(1), M)
    b = sample_grade(strategy, q, np.random.default_rng(2), M)
    assert a == b


@given(strategies, st.floats(0, M), st.integers(0, 1000))
def test_bias_variance_decomposition(strategy, q, seed):
    g = sample_grade(strategy, q, np.random.default_rng(seed), M, size=20_000)
    sq = (g - q) ** 2
    se = sq.std(ddof=1) / math.sqrt(g.size)
    # with sample moments (ddof 0) the identity is exact up to rounding
    assert sq.mean() == pytest.approx(g.var() + (g.mean() - q) ** 2, rel=1e-9, abs=1e-12)
    assert abs(sq.mean() - (g.var(ddof=1) + (g.mean() - q) ** 2)) <= 3 * se + 1e-9


@given(st.integers(0, 10_000), st.floats(-5, 5), st.floats(-5, 5))
def test_algebraic_identity_with_sample_means(seed, a, b):
    xi = np.random.default_rng(seed).normal(1.0, 2.0, 50)
    E = xi.mean()
    lhs = ((xi - a) ** 2).mean()
    rhs = ((xi - E) ** 2).mean() + (E - b) ** 2 - 2 * (E - b) * (a - b) + (b - a) ** 2
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


def test_algebraic_identity_bulk():
    rng = np.random.default_rng(0)
    xi = rng.normal(size=(100_000, 8))
    a, b = rng.normal(size=100_000) * 3, rng.normal(size=100_000) * 3
    E = xi.mean(axis=1)
    lhs = ((xi - a[:, None]) ** 2).mean(axis=1)
    rhs = ((xi - E[:, None]) ** 2).mean(axis=1) + (E - b) ** 2 - 2 * (E - b) * (a - b) + (b - a) ** 2
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


# -- sigma-truthfulness -------------------------------------------------------

def test_truthful_is_sigma_truthful():
    r = is_sigma_truthful(Strategy.truthful(), 1.0, GRID)
    assert r.truthful and r.worst_error == 0


def test_borderline_bias_and_noise_is_sigma_truthful():
    r = is_sigma_truthful(Strategy.truthful_plus_noise(0.6, 0.8), 1.0, GRID)
    assert r.truthful
    # clipping can only shrink the error below the unclipped 0.36 + 0.64
    assert r.worst_error == pytest.approx(1.0, abs=1e-6)
    assert r.method == "exact"


def test_large_bias_not_sigma_truthful():
    r = is_sigma_truthful(Strategy.truthful_plus_noise(1.0, 0.5), 1.0, GRID)
    assert not r.truthful
    assert r.worst_error == pytest.approx(1.25, abs=1e-6)


def test_exact_moments_match_quadrature_oracle():
    # values from an independent mpmath integration of the clipped normal
    s = Strategy.truthful_plus_noise(0.6, 0.8)
    for q, ref in [(5.0, 0.99999997326281), (9.5, 0.239359166866036)]:
        m, v = grade_moments(s, q, M)
        assert (m - q) ** 2 + v == pytest.approx(ref, abs=1e-9)
    s = Strategy.truthful_plus_noise(1.0, 0.5)
    m, v = grade_moments(s, 0.2, M)
    assert (m - 0.2) ** 2 + v == pytest.approx(1.24903879364918, abs=1e-9)


def test_exact_moments_match_scipy_quadrature():
    s = Strategy.affine(0.9, 1.0, measurement_noise_std=0.5, voluntary_noise_std=0.7)
    for q in (0.5, 5.0, 9.0):
        m, v = grade_moments(s, q, M)
        assert (m - q) ** 2 + v == pytest.approx(expected_squared_error_quad(s, q, M), abs=1e-7)


def test_monte_carlo_route_for_uniform_noise():
    s = Strategy(voluntary_noise_std=0.5, noise_shape="uniform_clipped")
    r = is_sigma_truthful(s, 1.0, [5.0], samples=200_000)
    assert r.method == "monte_carlo"
    assert abs(r.worst_error - 0.25) <= 3 * r.std_error


def test_sigma_truthful_rejects_bad_grid():
    with pytest.raises(ValueError):
        is_sigma_truthful(Strategy.truthful(), 1.0, [])
    with pytest.raises(ValueError):
        is_sigma_truthful(Strategy.truthful(), 1.0, [11.0])


# -- quality distributions -------------------------------------------------------

def test_quality_moments():
    assert QualityDistribution.uniform(2, 8).moments(M) == (5.0, 3.0)
    mean, var = QualityDistribution.discrete([0, 10], [0.5, 0.5]).moments(M)
    assert (mean, var) == (5.0, 25.0)
    mean, var = QualityDistribution.gaussian_clipped(5, 1).moments(M)
    assert mean == pytest.approx(5.0) and var == pytest.approx(1.0, abs=1e-5)


def test_quality_support_validated():
    with pytest.raises(ValueError):
        QualityDistribution.uniform(-1, 5).validate(M)


def test_discrete_probs_must_sum_to_one():
    with pytest.raises(ValueError):
        QualityDistribution.discrete([1, 2], [0.5, 0.4])


# -- grade graphs --------------------------------------------------------------

def test_realize_graph_deterministic():
    a = build_assignment(8, 3, seed=2)
    q = {i: float(i) for i in range(8)}
    prof = StrategyProfile(Strategy.truthful_plus_noise(0, 1))
    assert realize_graph(a, q, prof, seed=5) == realize_graph(a, q, prof, seed=5)
    assert realize_graph(a, q, prof, seed=5) != realize_graph(a, q, prof, seed=6)


def test_realize_graph_override_zero_map():
    a = build_assignment(8, 3, seed=2)
    q = {i: 5.0 for i in range(8)}
    prof = StrategyProfile(Strategy.truthful(), {3: Strategy.constant(0.0)})
    g = realize_graph(a, q, prof, seed=0)
    assert all(g.grade(i, 3) == 0.0 for i in g.reviewed_by(3))


def test_realize_graph_missing_quality():
    a = build_assignment(5, 2)
    with pytest.raises(ConfigurationError):
        realize_graph(a, {0: 1.0}, StrategyProfile(Strategy.truthful()), seed=0)


def test_grade_graph_validation():
    with pytest.raises(ValueError, match="duplicate"):
        GradeGraph(10, (("a", 1, 3.0), ("a", 1, 4.0)))
    with pytest.raises(ValueError, match="outside"):
        GradeGraph(10, (("a", 1, 11.0),))
    with pytest.raises(ValueError, match="own submission"):
        GradeGraph(10, (("a", 1, 3.0),), owners={"a": 1})
