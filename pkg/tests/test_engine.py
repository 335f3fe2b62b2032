import numpy as np
import pytest
from hypothesis import given, strategies as st

from peergrade.assignment import build_assignment, build_review_tree
from peergrade.dynamics import evaluate_candidates, expected_loss
from peergrade.engine import QualitySource, ReviewStructure, RunningMoments, StudentLoss, draw_block, profile_grades
from peergrade.losses import LossSpec, evaluate
from peergrade.model import GradeGraph, QualityDistribution, Strategy, StrategyProfile

QD = QualityDistribution.uniform(0, 10)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200), st.integers(1, 199))
def test_running_moments_merge(values, cut):
    cut = min(cut, len(values) - 1)
    a, b = RunningMoments(), RunningMoments()
    a.update(np.array(values[:cut]))
    b.update(np.array(values[cut:]))
    a.merge(b)
    assert a.count == len(values)
    assert a.mean == pytest.approx(np.mean(values), rel=1e-9, abs=1e-9)
    assert a.variance == pytest.approx(np.var(values, ddof=1), rel=1e-7, abs=1e-7)


SPECS = [LossSpec("l2"), LossSpec("l2_exclusive"), LossSpec.flat(0.3, 0.7),
         LossSpec.flat(0.4, form="realized", instructor_set=frozenset({1, 4})),
         LossSpec.var(0.5, "local"), LossSpec.var(0.5, "global")]


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.scheme}-{s.form}-{s.variant}")
def test_vectorized_loss_matches_graph_loss(spec):
    """Per-replicate engine losses equal the reference implementation on realized graphs."""
    a = build_assignment(7, 3, seed=4)
    st_ = ReviewStructure.from_assignment(a, 10)
    prof = StrategyProfile(Strategy.truthful_plus_noise(0.2, 1.0), {2: Strategy.constant(9.0, 0.5)})
    d = draw_block(st_, QualitySource(st_, QD), np.random.default_rng(0), 5)
    G = profile_grades(st_, prof, d)
    for u in (0, 2, 5):
        vals = StudentLoss(st_, u, spec, G, d)(G[:, st_.edges_of(u)])
        for r in range(5):
            edges = tuple((st_.submissions[st_.edge_sub[e]], st_.students[st_.edge_stu[e]], G[r, e])
                          for e in range(st_.n_edges))
            graph = GradeGraph(10, edges, {s: d.q[r, j] for j, s in enumerate(st_.submissions)})
            assert vals[r] == pytest.approx(evaluate(graph, u, spec).total, rel=1e-10, abs=1e-10)


def test_sampled_instructor_set_size():
    st_ = ReviewStructure.from_assignment(build_assignment(12, 3, seed=1), 10)
    spec = LossSpec.flat(0.5, form="realized", instructor_set="sampled", instructor_k=4)
    d = draw_block(st_, QualitySource(st_, QD), np.random.default_rng(0), 50, instructor_keys=True)
    ranks = d.instructor_keys.argsort(axis=1).argsort(axis=1)
    assert np.all((ranks < 4).sum(axis=1) == 4)
    sl = StudentLoss(st_, 0, spec, profile_grades(st_, StrategyProfile(Strategy.truthful()), d), d)
    assert sl.instructed.shape == (50, 3)


def test_tree_structure_loss():
    tree = build_review_tree(list(range(8)), list(range(100, 106)), 2, seed=0)
    st_ = ReviewStructure.from_tree(tree, 10)
    spec = LossSpec("tree", tree=tree)
    r = expected_loss(StrategyProfile(Strategy.truthful()), 100, spec, QD, st_, replicates=200)
    assert r.estimate == 0


@pytest.mark.parametrize("threads", [2, 4])
def test_thread_count_does_not_change_results(threads):
    st_ = ReviewStructure.from_assignment(build_assignment(10, 3, seed=2), 10)
    prof = StrategyProfile(Strategy.truthful_plus_noise(0, 1))
    kw = dict(structure=st_, replicates=5000, seed=3)
    one = expected_loss(prof, 0, LossSpec("l2"), QD, block_size=512, **kw)
    many = expected_loss(prof, 0, LossSpec("l2"), QD, block_size=512, threads=threads, **kw)
    assert one == many


def test_same_seed_same_report():
    st_ = ReviewStructure.from_assignment(build_assignment(10, 3, seed=2), 10)
    prof = StrategyProfile(Strategy.truthful_plus_noise(0, 1))
    a = expected_loss(prof, 0, LossSpec("l2"), QD, st_, replicates=3000, seed=1)
    b = expected_loss(prof, 0, LossSpec("l2"), QD, st_, replicates=3000, seed=1)
    c = expected_loss(prof, 0, LossSpec("l2"), QD, st_, replicates=3000, seed=2)
    assert a.to_json() == b.to_json()
    assert a.estimate != c.estimate


def test_paired_difference_identical_strategies_is_zero():
    st_ = ReviewStructure.from_assignment(build_assignment(10, 3, seed=2), 10)
    s = Strategy.truthful_plus_noise(0.3, 1.0)
    src = QualitySource(st_, QD)
    _, diffs = evaluate_candidates(StrategyProfile(s), 0, [s, Strategy.truthful_plus_noise(0.3, 1.0)],
                                   LossSpec.flat(0.5), st_, src, 4000, 0, reference=0)
    assert diffs[1].mean == 0 and diffs[1].m2 == 0


def test_fixed_qualities_validated():
    st_ = ReviewStructure.from_assignment(build_assignment(4, 2), 10)
    with pytest.raises(ValueError):
        QualitySource(st_, fixed={0: 1.0})
    with pytest.raises(ValueError):
        QualitySource(st_, QD, fixed=[1, 2, 3, 4])
