"""``peergrade`` command-line interface.

Exit codes: 0 pass, 2 usage or configuration error, 3 inconclusive,
4 assertion refuted.  Numbers are printed with 6 significant digits; JSON
output keeps full precision.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bounds as B
from .assignment import (
    InfeasibleError,
    build_assignment,
    build_review_tree,
    coverage_probability,
    min_instructor_workload,
    required_tree_students,
)
from .config import (
    EXIT_INCONCLUSIVE,
    EXIT_OK,
    EXIT_REFUTED,
    EXIT_USAGE,
    ScenarioConfig,
    ScenarioError,
    dumps,
    run_scenario,
)
from .dynamics import (
    verify_agreement_decomposition,
    verify_global_variance_decomposition,
    compare_truthful_vs_constant_noise,
    iterate_best_response,
)
from .engine import ReviewStructure
from .io import (
    MALFORMED_LIMIT,
    FormatError,
    max_grader_stats,
    read_grade_records,
    read_manifest,
    write_assignment_csv,
    write_stats_csv,
    write_trajectory_csv,
)
from .losses import LossSpec
from .model import QualityDistribution, Strategy, StrategyProfile


class UsageError(Exception):
    pass


def fmt(x) -> str:
    return f"{x:.6g}"


# -- bounds -------------------------------------------------------------------

def _cost(args) -> float:
    if args.cost is not None and args.minutes is not None:
        raise UsageError("give either --cost or --minutes, not both")
    if args.minutes is not None:
        return B.review_cost(args.minutes, args.weight)
    if args.cost is None:
        raise UsageError("a review cost is required (--cost in utility units or --minutes)")
    return args.cost


def _print_p(name, bound: B.PBound, formula: str) -> None:
    print(f"{name} = {fmt(bound.value)}")
    print(f"formula: {formula}")
    print(f"feasible: {'yes' if bound.feasible else 'no (bound >= 1)'}")


def cmd_bounds(args) -> int:
    kind = args.bound
    if kind == "min-p":
        C = _cost(args)
        _print_p("p_min", B.min_p_for_truthfulness(C, args.alpha, args.sigma), "p > sqrt(C / (alpha * sigma^2))")
        if args.curve:
            xs = np.linspace(0, args.curve_max, 61)
            B.write_curve_csv(args.curve, B.min_p_curve(xs, args.alpha, args.sigma, args.weight))
            print(f"curve written to {args.curve}")
    elif kind == "deviation-p":
        C = _cost(args)
        _print_p("p_dev", B.deviation_bound_p(C, args.alpha, args.gap), "p > sqrt(C / (alpha * (D - q)^2))")
    elif kind == "convergence":
        for t, e in enumerate(B.convergence_errors(args.p, args.gap, args.steps), start=1):
            print(f"{t} {fmt(e)}")
        print("formula: e_t = (1-p)^(2(t-1)) * (D-q)^2")
    elif kind == "tree-honesty":
        ok = B.tree_honesty_condition(args.P, args.K, args.H, args.D)
        print(f"honest: {'yes' if ok else 'no'}")
        print(f"formula: P > K (H - D): {fmt(args.P)} > {fmt(args.K * (args.H - args.D))}")
    elif kind == "tree-cost":
        c = B.tree_cost_bound(args.sigmaq2, args.eq, args.M, args.K)
        print(f"C_max = {fmt(c)}")
        print("formula: C < (sigma_q^2 + (M - Eq)^2) / K")
        if args.curve:
            mins = args.curve_minutes or [5.0, 10.0, 20.0, 30.0]
            curves = B.variance_bound_curves(mins, args.K, args.M)
            base = Path(args.curve)
            for m, rows in curves.items():
                path = base.with_name(f"{base.stem}_{m:g}min{base.suffix or '.csv'}")
                B.write_curve_csv(path, rows)
                print(f"curve written to {path}")
    elif kind == "gamma":
        r = B.gamma_range(args.cost if args.cost is not None else 0.0, args.sigmaq2, args.eta2, args.n)
        print(f"gamma_range = {r}")
        print(f"case: {r.case}")
        print("formula: truthful beats constant-plus-noise iff n/(n-1) eta^2 - gamma eta^2 > C - gamma sigma_q^2")
        print(f"feasible: {'no' if r.empty else 'yes'}")
    elif kind == "workload":
        k = min_instructor_workload(args.students, args.reviews, args.target_p)
        print(f"k = {k}")
        print(f"coverage at k: {fmt(coverage_probability(args.students, args.reviews, k))}")
        if k > 0:
            print(f"coverage at k-1: {fmt(coverage_probability(args.students, args.reviews, k - 1))}")
        print("formula: p = 1 - C(N-m, k) / C(N, k)")
    elif kind == "coverage":
        print(f"p = {fmt(coverage_probability(args.students, args.reviews, args.k))}")
        print("formula: p = 1 - C(N-m, k) / C(N, k)")
    return EXIT_OK


# -- assign / tree --------------------------------------------------------------

def cmd_assign(args) -> int:
    a = build_assignment(args.students, args.reviews, seed=args.seed or 0)
    if args.out:
        write_assignment_csv(a, args.out)
        print(f"{len(a.edges)} review edges written to {args.out}")
    else:
        print("submission_id,student_id")
        for i, u in a.sorted_edges():
            print(f"{i},{u}")
    return EXIT_OK


def cmd_tree(args) -> int:
    subs = list(range(args.submissions))
    need = required_tree_students(len(subs), args.K, args.levels)
    n_students = args.students if args.students is not None else need
    students = list(range(args.submissions, args.submissions + n_students))
    tree = build_review_tree(subs, students, args.K, seed=args.seed or 0, student_levels=args.levels,
                             extra_leaf_reviewers=args.extra_reviewers)
    text = json.dumps(tree.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"tree with depth {tree.depth} written to {args.out}")
    else:
        print(text)
    return EXIT_OK


# -- simulate / check -------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = ScenarioConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.replicates is not None:
        cfg = replace(cfg, replicates=args.replicates)
    result, code = run_scenario(cfg, threads=args.threads)
    text = dumps(result)
    out = args.out or cfg.outputs.get("report")
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    sys.stdout.write(text)
    return code


def _status_code(status: str) -> int:
    return {"pass": EXIT_OK, "inconclusive": EXIT_INCONCLUSIVE, "range_empty": EXIT_INCONCLUSIVE,
            "outside_range": EXIT_INCONCLUSIVE}.get(status, EXIT_REFUTED)


def _tpn(text: str) -> Strategy:
    try:
        b, s = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"expected 'bias,std', got {text!r}") from None
    return Strategy.truthful_plus_noise(b, s)


def cmd_check(args) -> int:
    seed, reps, th = args.seed or 0, getattr(args, "replicates", None), args.threads
    if args.check == "convergence":
        steps = iterate_best_response(Strategy.constant(args.D), LossSpec.flat(args.p), args.rounds,
                                      q=args.q, max_grade=args.M)
        ref = B.convergence_errors(args.p, args.D - args.q, args.rounds)
        worst = max(abs(s.error - r) for s, r in zip(steps, ref))
        for s in steps:
            print(f"{s.round} {fmt(s.grade)} {fmt(s.error)}")
        if args.out:
            write_trajectory_csv(steps, args.out)
        status = "pass" if worst <= 1e-9 else "fail"
        print(f"max |e_t - closed form| = {fmt(worst)}: {status}")
        return _status_code(status)
    if args.check == "unsupervised":
        r = compare_truthful_vs_constant_noise(args.eta2, args.gamma, args.n, args.sigmaq2, args.variant, args.cost,
                                     replicates=reps, seed=seed, threads=th)
        print(f"gamma range: {r.gamma_range}")
        print(f"truthful: {fmt(r.truthful.estimate)} +- {fmt(r.truthful.std_error)} "
              f"(analytic {fmt(r.truthful_analytic)})")
        print(f"constant+noise: {fmt(r.const_noise.estimate)} +- {fmt(r.const_noise.std_error)} "
              f"(analytic {fmt(r.const_noise_analytic)})")
        print(f"status: {r.status}")
        return _status_code(r.status)
    # bias-variance lemmas
    M = 20.0
    qd = QualityDistribution.uniform(M / 2 - 2, M / 2 + 2)
    opp = StrategyProfile(Strategy.truthful_plus_noise(0.0, args.opponent_std))
    a, b = _tpn(args.a), _tpn(args.b)
    if args.check == "agreement-lemma":
        st = ReviewStructure.from_assignment(build_assignment(args.students, args.reviews, seed=seed), M)
        r = verify_agreement_decomposition(a, b, opp, st.students[0], st, qd, reps, seed, threads=th)
    else:
        st = ReviewStructure.from_assignment(build_assignment(args.students, args.reviews, seed=seed), M)
        r = verify_global_variance_decomposition(a, b, opp, st.students[0], st, qd, reps, seed, threads=th)
    print(f"{r.name}: observed {fmt(r.observed)} +- {fmt(r.std_error)}, predicted {fmt(r.predicted)}")
    print(f"status: {r.status}")
    return _status_code(r.status)


# -- curves / ingest ------------------------------------------------------------

def cmd_curves(args) -> int:
    out = Path(args.out_dir)
    xs = np.linspace(0, args.max_minutes, 61)
    p = B.write_curve_csv(out / "min_p_vs_minutes.csv", B.min_p_curve(xs, args.alpha, args.sigma, args.weight))
    print(f"wrote {p}")
    for m, rows in B.variance_bound_curves(args.minutes, args.K, args.M, weight=args.weight).items():
        p = B.write_curve_csv(out / f"variance_bound_{m:g}min.csv", rows)
        print(f"wrote {p}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    try:
        rf = read_grade_records(args.records)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for bad in rf.malformed:
        print(f"{args.records}:{bad.line}: malformed row: {bad.reason}", file=sys.stderr)
    if rf.n_rows == 0:
        print(f"error: {args.records}: no grade records", file=sys.stderr)
        return EXIT_USAGE
    if rf.malformed_fraction > MALFORMED_LIMIT:
        print(f"error: {len(rf.malformed)} of {rf.n_rows} rows malformed (limit {MALFORMED_LIMIT:.0%})",
              file=sys.stderr)
        return EXIT_USAGE
    stats = max_grader_stats(rf.records, read_manifest(args.manifest))
    if args.out:
        write_stats_csv(stats, args.out)
    print("assignment_id,max_grade_fraction,max_grader_fraction,n_grades,n_students")
    for s in stats:
        print(f"{s.assignment_id},{fmt(s.max_grade_fraction)},{fmt(s.max_grader_fraction)},"
              f"{s.n_grades},{s.n_students}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master random seed (default 0)")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for Monte Carlo; results do not depend on it")


def _cost_flags(p):
    p.add_argument("--cost", type=float, help="review cost C in utility units")
    p.add_argument("--minutes", type=float, help="review time in minutes, converted with --weight")
    p.add_argument("--weight", type=float, default=B.DEFAULT_COST_WEIGHT,
                   help="utility per hour of reviewing (default 0.75)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peergrade",
        description="Incentive bounds, simulations and equilibrium checks for peer grading.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="exit codes: 0 pass, 2 usage/config error, 3 inconclusive, 4 refuted",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    bp = sub.add_parser("bounds", help="closed-form incentive bounds",
                        description=(
                            "Closed-form bounds:\n"
                            "  min-p         instructor probability forcing sigma-truthful equilibria\n"
                            "  deviation-p   probability making reviewing beat a fixed guessed grade\n"
                            "  convergence   geometric error decay of best-response grading dynamics\n"
                            "  tree-honesty  honesty condition P > K(H - D) in a review tree\n"
                            "  tree-cost     review-cost ceiling against max-graders in a review tree\n"
                            "  gamma         variance-penalty weights making truthful beat constant-plus-noise\n"
                            "  workload      smallest instructor workload reaching a coverage target\n"
                            "  coverage      probability a reviewer shares a submission with the instructor"),
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    bsub = bp.add_subparsers(dest="bound", required=True, metavar="BOUND")

    p = bsub.add_parser("min-p", help="instructor probability forcing sigma-truthful equilibria")
    _cost_flags(p)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--curve", help="write the bound versus review minutes to this CSV")
    p.add_argument("--curve-max", type=float, default=30.0, help="largest minutes value on the curve")
    _common(p)

    p = bsub.add_parser("deviation-p", help="probability making reviewing beat a fixed guess")
    _cost_flags(p)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--gap", type=float, required=True, help="|D - q|, distance of the guess from the truth")
    _common(p)

    p = bsub.add_parser("convergence", help="error decay of best-response dynamics")
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--gap", type=float, required=True, help="initial D - q")
    p.add_argument("--steps", type=int, default=10)
    _common(p)

    p = bsub.add_parser("tree-honesty", help="honesty condition P > K(H - D)")
    for flag in ("P", "K", "H", "D"):
        p.add_argument(f"--{flag}", type=float, required=True)
    _common(p)

    p = bsub.add_parser("tree-cost", help="review-cost ceiling in a review tree")
    p.add_argument("--sigmaq2", type=float, required=True, help="quality variance")
    p.add_argument("--eq", type=float, required=True, help="mean quality")
    p.add_argument("--M", type=float, default=10.0)
    p.add_argument("--K", type=float, required=True)
    p.add_argument("--curve", help="write variance-bound curves versus mean quality (one CSV per cost)")
    p.add_argument("--curve-minutes", type=float, nargs="+", help="review minutes, one curve each")
    _common(p)

    p = bsub.add_parser("gamma", help="admissible variance-penalty weights")
    p.add_argument("--cost", type=float, default=0.0)
    p.add_argument("--sigmaq2", type=float, required=True)
    p.add_argument("--eta2", type=float, required=True)
    p.add_argument("--n", type=int, required=True, help="reviews per student")
    _common(p)

    for name, hlp in (("workload", "smallest instructor workload for a coverage target"),
                      ("coverage", "coverage probability for a workload")):
        p = bsub.add_parser(name, help=hlp)
        p.add_argument("--students", type=int, required=True)
        p.add_argument("--reviews", type=int, required=True)
        if name == "workload":
            p.add_argument("--target-p", type=float, required=True)
        else:
            p.add_argument("--k", type=int, required=True)
        _common(p)
    bp.set_defaults(func=cmd_bounds)

    p = sub.add_parser("assign", help="random regular review assignment (CSV)")
    p.add_argument("--students", type=int, required=True)
    p.add_argument("--reviews", type=int, required=True)
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("tree", help="random instructor-rooted review tree (JSON)")
    p.add_argument("--submissions", type=int, required=True)
    p.add_argument("--K", type=int, required=True, help="branching factor")
    p.add_argument("--students", type=int, help="available students (default: the minimum needed)")
    p.add_argument("--levels", type=int, help="number of student levels (needed for K=1 chains)")
    p.add_argument("--extra-reviewers", type=int, default=0, help="extra reviewers per leaf submission")
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_tree)

    p = sub.add_parser("simulate", help="run a scenario config and emit a JSON report")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--replicates", type=int)
    _common(p)
    p.set_defaults(func=cmd_simulate)

    cp = sub.add_parser("check", help="Monte Carlo checks of the analytic results",
                        description=(
                            "Checks:\n"
                            "  convergence      best-response grades converge geometrically under supervision\n"
                            "  unsupervised     truthful beats constant-plus-noise under the variance-penalized loss\n"
                            "  agreement-lemma  expected exclusive agreement loss = sigma_u^2 + b_u^2 + const\n"
                            "  variance-lemma   expected global sample variance coefficients in sigma_u^2, b_u^2"),
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    csub = cp.add_subparsers(dest="check", required=True, metavar="CHECK")
    p = csub.add_parser("convergence", help="geometric convergence of best-response grades")
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--D", type=float, default=10.0)
    p.add_argument("--q", type=float, default=6.0)
    p.add_argument("--M", type=float, default=10.0)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--out", help="trajectory CSV round,grade,error")
    _common(p)
    p = csub.add_parser("unsupervised", help="truthful versus constant-plus-noise, variance-penalized loss")
    p.add_argument("--eta2", type=float, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--sigmaq2", type=float, default=1.0)
    p.add_argument("--variant", choices=["local", "global"], default="local")
    p.add_argument("--cost", type=float, default=0.0)
    p.add_argument("--replicates", type=int, default=100_000)
    _common(p)
    for name, hlp in (("agreement-lemma", "bias-variance form of the exclusive agreement loss"),
                      ("variance-lemma", "coefficients of the expected global sample variance")):
        p = csub.add_parser(name, help=hlp)
        p.add_argument("--a", default="0.5,0", help="strategy A as 'bias,std' of truthful plus noise")
        p.add_argument("--b", default="0,0", help="strategy B as 'bias,std'")
        p.add_argument("--students", type=int, default=10)
        p.add_argument("--reviews", type=int, default=5)
        p.add_argument("--opponent-std", type=float, default=1.0)
        p.add_argument("--replicates", type=int, default=100_000)
        _common(p)
    cp.set_defaults(func=cmd_check)

    p = sub.add_parser("curves", help="write bound curves (probability vs minutes, variance vs mean quality)")
    p.add_argument("--out-dir", default="curves")
    p.add_argument("--alpha", type=float, default=0.25)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--weight", type=float, default=B.DEFAULT_COST_WEIGHT)
    p.add_argument("--max-minutes", type=float, default=30.0)
    p.add_argument("--minutes", type=float, nargs="+", default=[5.0, 10.0, 20.0, 30.0])
    p.add_argument("--K", type=float, default=5)
    p.add_argument("--M", type=float, default=10.0)
    _common(p)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("ingest", help="max-grade and max-grader fractions per assignment from grade records")
    p.add_argument("records", help="CSV assignment_id,student_id,submission_id,grade")
    p.add_argument("manifest", help="JSON mapping assignment id to its maximum grade")
    p.add_argument("--out", help="stats CSV")
    _common(p)
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, InfeasibleError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
