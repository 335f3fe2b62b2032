"""Acceptance criteria, each run at its stated tolerance and time budget.

Every test records one pass/fail line (shown in the terminal summary)
before asserting.
"""

import math
import time
from fractions import Fraction
from math import comb

import numpy as np
import pytest

from peergrade.assignment import (
    build_assignment,
    build_review_tree,
    complete_assignment,
    coverage_probability,
    min_instructor_workload,
    required_tree_students,
)
from peergrade.bounds import convergence_errors, min_p_curve, variance_bound_curves, gamma_range, review_cost, tree_cost_bound, tree_honesty_condition
from peergrade.cli import main
from peergrade.dynamics import (
    StrategyGrid,
    check_equilibrium,
    compare_truthful_vs_constant_noise,
    evaluate_candidates,
    iterate_best_response,
    verify_agreement_decomposition,
    verify_global_variance_decomposition,
)
from peergrade.engine import QualitySource, ReviewStructure
from peergrade.losses import LossSpec
from peergrade.model import QualityDistribution, Strategy, StrategyProfile


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def cli_value(capsys, argv, key):
    code = main(argv)
    out = capsys.readouterr().out
    assert code == 0, out
    line = next(l for l in out.splitlines() if l.startswith(key))
    return out, line.split("=", 1)[1].strip()


# 1 ---------------------------------------------------------------------------

def test_classroom_example(capsys, acceptance):
    with Timer() as t:
        _, p = cli_value(capsys, ["bounds", "min-p", "--minutes", "5", "--alpha", "0.25", "--sigma", "1",
                                  "--weight", "0.75"], "p_min")
        _, k = cli_value(capsys, ["bounds", "workload", "--students", "100", "--reviews", "5",
                                  "--target-p", "0.5"], "k")
        from peergrade.bounds import min_p_for_truthfulness
        p_exact = min_p_for_truthfulness(review_cost(5), 0.25, 1.0).value
    ok = (abs(float(p) - 0.5) <= 1e-9 and abs(p_exact - 0.5) <= 1e-9 and int(k) == 13
          and min_instructor_workload(100, 5, 0.5) == 13 and coverage_probability(100, 5, 12) < 0.5
          and t.elapsed < 1.0)
    acceptance(1, "classroom example p=0.5, k=13", ok, f"p={p_exact!r}, k={k}, {t.elapsed:.2f}s")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_coverage_oracle(acceptance):
    worst = 0.0
    with Timer() as t:
        for N in range(1, 21):
            masks = np.arange(1 << N, dtype=np.int64)
            pop = np.zeros(masks.size, dtype=np.int64)
            for b in range(N):
                pop += (masks >> b) & 1
            for m in range(0, min(5, N) + 1):
                hits = (masks & ((1 << m) - 1)) != 0  # the student's m submissions are items 0..m-1
                counts = np.bincount(pop[hits], minlength=N + 1)
                for k in range(N + 1):
                    worst = max(worst, abs(coverage_probability(N, m, k) - counts[k] / comb(N, k)))
    ok = worst <= 1e-12 and t.elapsed < 10
    acceptance(2, "coverage probability equals enumeration for N<=20", ok, f"max err {worst:.2e}, {t.elapsed:.2f}s")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_best_response_convergence(acceptance):
    worst_formula = worst_bounds = 0.0
    with Timer() as t:
        for p in (0.1, 0.5, 0.9):
            steps = iterate_best_response(Strategy.constant(10.0), LossSpec.flat(p), 10, q=6.0)
            errs = [s.error for s in steps]
            formula = [(1 - p) ** (2 * (k - 1)) * 16 for k in range(1, 11)]
            worst_formula = max(worst_formula, max(abs(a - b) for a, b in zip(errs, formula)))
            worst_bounds = max(worst_bounds, max(abs(a - b) for a, b in zip(formula, convergence_errors(p, 4, 10))))
    ok = worst_formula <= 1e-9 and worst_bounds == 0 and t.elapsed < 1
    acceptance(3, "best-response errors decay as (1-p)^(2(t-1)) 16", ok,
               f"sim err {worst_formula:.1e}, closed form err {worst_bounds:.1e}, {t.elapsed:.2f}s")
    assert ok


# 4 ---------------------------------------------------------------------------

def _collusion_check(p, structure):
    fixed = {s: 6.0 for s in structure.submissions}
    return check_equilibrium(StrategyProfile(Strategy.constant(10.0)), StrategyGrid.constant(10.0),
                             LossSpec.flat(p, 1.0), structure=structure, cost=1.0, students=[0],
                             replicates=100_000, seed=0, cost_rule="deviation", fixed_qualities=fixed)


def test_supervised_deviation_check(acceptance):
    st_ = ReviewStructure.from_assignment(build_assignment(10, 3, seed=1), 10.0)
    with Timer() as t:
        hi = _collusion_check(0.6, st_)
        lo = _collusion_check(0.3, st_)
    analytic = 0.36 * 16 - 1
    ok_hi = hi.found and hi.gain > 1.0 and abs(hi.gain - analytic) <= 3 * hi.std_error + 1e-9
    ok_lo = lo.verdict == "no_profitable_deviation_on_grid"
    ok = ok_hi and ok_lo and t.elapsed < 30
    acceptance(4, "deviation found at p=0.6, none at p=0.3", ok,
               f"p=0.6 gain {hi.gain:.6g} (analytic {analytic:.6g}); p=0.3 verdict {lo.verdict}"
               + (f" via {lo.deviation} gain {lo.gain:.6g}" if lo.found else "") + f", {t.elapsed:.1f}s")
    assert ok_hi
    assert ok_lo, (f"p=0.3 deviation {lo.deviation} gains {lo.gain:.6g} > 0; the reviewing threshold "
                   f"sqrt(C/(alpha*16)) is 0.25, not 0.5 (see decisions ledger)")


# 5 ---------------------------------------------------------------------------

def test_review_tree_equilibrium(acceptance):
    qd = QualityDistribution.uniform(0, 10)
    grid = StrategyGrid.constant(10.0) | StrategyGrid.truthful_plus_noise(0.5, 0.5, 0.25)
    failures = []
    n_trees = 0
    with Timer() as t:
        rng = np.random.default_rng(2024)
        for K in (2, 3):
            for _ in range(3):
                n = int(rng.integers(2, 65))
                seed = int(rng.integers(1 << 30))
                need = required_tree_students(n, K)
                tree = build_review_tree(list(range(n)), list(range(1000, 1000 + need)), K, seed=seed)
                st_ = ReviewStructure.from_tree(tree, 10.0)
                loss = LossSpec("tree", tree=tree)
                v = check_equilibrium(StrategyProfile(Strategy.truthful()), grid, loss, qd, st_, cost=0.0,
                                      replicates=2000, seed=seed)
                if v.verdict != "no_profitable_deviation_on_grid":
                    failures.append(f"K={K} n={n}: {v.verdict}")
                # a single defector to constant M pays strictly more on every replicate
                for node in tree.student_nodes():
                    _, d = evaluate_candidates(StrategyProfile(Strategy.truthful()), node.id,
                                               [Strategy.truthful(), Strategy.constant(10.0)], loss, st_,
                                               QualitySource(st_, qd), 500, seed, reference=0)
                    if not -d[1].mean > 0:
                        failures.append(f"K={K} n={n}: defector {node} gained")
                n_trees += 1
    ok = not failures and t.elapsed < 30
    acceptance(5, "truthful tree profile has no profitable deviation; max-grade defectors lose", ok,
               f"{n_trees} trees, {t.elapsed:.1f}s" + (f"; {failures[:3]}" if failures else ""))
    assert ok


# 6 ---------------------------------------------------------------------------

def test_tree_cost_bound(acceptance):
    rng = np.random.default_rng(6)
    mismatches = 0
    with Timer() as t:
        for _ in range(1000):
            P, H, D = (int(x) for x in rng.integers(-20, 21, 3))
            K = int(rng.integers(1, 9))
            # direct comparison of per-review utilities: honest pays H, a defector pays D
            # and is caught by its parent with probability 1/K
            honest = Fraction(-H) > Fraction(-D) - Fraction(P, K)
            mismatches += honest != tree_honesty_condition(P, K, H, D)
        # max-grader application: punishment l_D - l_H with exact moments of a discrete quality law
        for _ in range(200):
            vals = [Fraction(int(v), 4) for v in rng.integers(0, 41, 3)]
            K = int(rng.integers(1, 9))
            C = Fraction(int(rng.integers(0, 200)), 8)
            mean = sum(vals) / 3
            var = sum((v - mean) ** 2 for v in vals) / 3
            l_D, l_H = sum((10 - v) ** 2 for v in vals) / 3, 0
            mismatches += (l_D - l_H > K * C) != tree_honesty_condition(float(l_D - l_H), K, float(C), 0.0)
            mismatches += (l_D - l_H > K * C) != (C < Fraction(tree_cost_bound(float(var), float(mean), 10, K)))
    c_max = tree_cost_bound(1.0, 9.5, 10.0, 5)
    ok = mismatches == 0 and c_max == 0.25 and t.elapsed < 1
    acceptance(6, "tree honesty condition matches direct utility comparison; C_max=0.25", ok,
               f"{mismatches} mismatches, C_max={c_max}, {t.elapsed:.2f}s")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_unsupervised_truthful_beats_constant_noise(acceptance):
    rows, bad = [], []
    with Timer() as t:
        for gamma in (0.25, 0.5, 0.75):
            for ratio in (0.25, 1.0, 4.0):
                r = compare_truthful_vs_constant_noise(ratio * 1.0, gamma, 5, 1.0, "local", C=0.0,
                                             replicates=100_000, seed=11)
                expect_const = 5 * ratio / 4 - gamma * ratio
                ok = (r.status == "pass" and r.truthful_analytic == pytest.approx(-gamma)
                      and r.const_noise_analytic == pytest.approx(expect_const))
                rows.append((gamma, ratio, r.status))
                if not ok:
                    bad.append((gamma, ratio, r.status, r.checks))
        cases = {ratio: gamma_range(0.0, 1.0, ratio, 5).case for ratio in (0.25, 1.0, 4.0)}
        empty = gamma_range(1.0, 1.0, 1.0, 5)
    ok_cases = cases == {0.25: "eta2_lt_sigma_q2", 1.0: "eta2_eq_sigma_q2", 4.0: "eta2_gt_sigma_q2"} and empty.empty
    ok = not bad and ok_cases and t.elapsed < 60
    acceptance(7, "truthful beats constant-plus-noise; estimates match analytic values", ok,
               f"{len(rows) - len(bad)}/9 cells, cases ok={ok_cases}, {t.elapsed:.1f}s")
    assert ok


# 8 ---------------------------------------------------------------------------

def test_bias_variance_lemmas(acceptance):
    M = 20.0
    qd = QualityDistribution.uniform(8, 12)
    opp = StrategyProfile(Strategy.truthful_plus_noise(0, 1.0))
    tpn = Strategy.truthful_plus_noise
    T = Strategy.truthful()
    regular = ReviewStructure.from_assignment(build_assignment(10, 5, seed=3), M)
    pairs1 = [(T, T), (tpn(0.5, 0), T), (tpn(0, 1), tpn(1, 0)), (tpn(-0.7, 0.4), T), (tpn(0.3, 1.2), tpn(0, 0.5))]
    complete = ReviewStructure.from_assignment(complete_assignment(5, 5), M)
    single = ReviewStructure.from_assignment(complete_assignment(1, 6), M)
    pairs2 = [(complete, T, T), (complete, tpn(0, 1), T), (complete, tpn(1, 0), T),
              (regular, tpn(0.5, 1.5), tpn(0, 0.5)), (single, tpn(1.0, 0), T)]
    statuses = []
    with Timer() as t:
        for a, b in pairs1:
            statuses.append(verify_agreement_decomposition(a, b, opp, 0, regular, qd, 100_000, seed=1).status)
        for st_, a, b in pairs2:
            r = verify_global_variance_decomposition(a, b, opp, 0, st_, qd, 100_000, seed=2)
            statuses.append(r.status)
        n_eq_K = verify_global_variance_decomposition(tpn(1.0, 0), T, opp, 0, single, qd, 100_000, seed=2)
    exact_zero = n_eq_K.details["bias_coef"] == 0 and abs(n_eq_K.observed) <= 1e-9
    ok = all(s == "pass" for s in statuses) and exact_zero and t.elapsed < 60
    acceptance(8, "bias-variance lemmas hold within 3 SE (10 combinations)", ok,
               f"{statuses.count('pass')}/10 pass, n=K bias term {n_eq_K.observed:.1e}, {t.elapsed:.1f}s")
    assert ok


# 9 ---------------------------------------------------------------------------

def test_ingest_and_curve_shapes(tmp_path, capsys, acceptance):
    rng = np.random.default_rng(9)
    problems = []
    lines = ["assignment_id,student_id,submission_id,grade"]
    planted = {}
    for a in range(5):
        n_students, n_rev = int(rng.integers(5, 40)), int(rng.integers(1, 6))
        maxers = int(rng.integers(0, n_students + 1))
        n_max_grades = 0
        for u in range(n_students):
            for j in range(n_rev):
                g = 10 if u < maxers or j > 0 else int(rng.integers(0, 10))
                n_max_grades += g == 10
                lines.append(f"{a},{u},{(u + j + 1) % 50},{g}")
        planted[a] = (n_max_grades / (n_students * n_rev), maxers / n_students)
    (tmp_path / "r.csv").write_text("\n".join(lines) + "\n")
    (tmp_path / "m.json").write_text('{"0": 10, "1": 10, "2": 10, "3": 10, "4": 10}')
    code = main(["ingest", str(tmp_path / "r.csv"), str(tmp_path / "m.json"), "--out", str(tmp_path / "s.csv")])
    capsys.readouterr()
    got = {}
    for row in (tmp_path / "s.csv").read_text().splitlines()[1:]:
        a, f_grades, f_students, *_ = row.split(",")
        got[int(a)] = (float(f_grades), float(f_students))
    if code != 0 or got != planted:
        problems.append("planted fractions not recovered")

    xs = np.linspace(0, 30, 61)
    ys = [y for _, y in min_p_curve(xs)]
    if not all(b > a for a, b in zip(ys, ys[1:])) or ys[0] != 0:
        problems.append("min-p curve not increasing from 0")
    if not all(math.isclose(y, ys[-1] * math.sqrt(x / 30), rel_tol=1e-12) for x, y in zip(xs, ys)):
        problems.append("min-p curve not proportional to sqrt(minutes)")
    for K in (2, 5):
        curves = variance_bound_curves([5, 10, 20], K=K, M=10, clamp=False)
        for mins, rows in curves.items():
            eq, v = map(np.array, zip(*rows))
            if v.argmax() != len(v) - 1 or not math.isclose(v[-1], K * review_cost(mins), rel_tol=1e-12):
                problems.append(f"vertex wrong K={K} minutes={mins}")
            if not np.allclose(v, K * review_cost(mins) - (10 - eq) ** 2):
                problems.append("variance bound not K C - (M - Eq)^2")
    ok = not problems
    acceptance(9, "ingest recovers planted max-grader fractions; curve shapes", ok, "; ".join(problems))
    assert ok
