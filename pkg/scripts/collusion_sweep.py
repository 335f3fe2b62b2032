"""Sweep the instructor probability and report when max-grade collusion breaks.

All opponents grade M; the checked student may deviate to any constant grade
on the grid and pays the review cost C for any deviation.

    python scripts/collusion_sweep.py --q 6 --cost 1
"""

import argparse
import math

import numpy as np

from peergrade.assignment import build_assignment
from peergrade.bounds import deviation_bound_p
from peergrade.dynamics import StrategyGrid, check_equilibrium
from peergrade.engine import ReviewStructure
from peergrade.losses import LossSpec
from peergrade.model import Strategy, StrategyProfile


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--q", type=float, default=6.0)
    ap.add_argument("--M", type=float, default=10.0)
    ap.add_argument("--cost", type=float, default=1.0)
    ap.add_argument("--alpha", type=float, default=1.0)
    ap.add_argument("--replicates", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    st = ReviewStructure.from_assignment(build_assignment(10, 3, seed=args.seed), args.M)
    fixed = {s: args.q for s in st.submissions}
    gap = args.M - args.q
    print(f"threshold sqrt(C/(alpha gap^2)) = {deviation_bound_p(args.cost, args.alpha, gap).value:.6g}")
    print("p,verdict,deviation,gain,analytic_gain")
    for p in np.round(np.arange(0.0, 1.0001, 0.05), 4):
        v = check_equilibrium(StrategyProfile(Strategy.constant(args.M)), StrategyGrid.constant(args.M),
                              LossSpec.flat(float(p), args.alpha), structure=st, cost=args.cost, students=[0],
                              replicates=args.replicates, seed=args.seed, cost_rule="deviation",
                              fixed_qualities=fixed)
        analytic = args.alpha * p * p * gap * gap - args.cost
        print(f"{p:g},{v.verdict},{v.deviation or ''},{'' if v.gain is None else f'{v.gain:.6g}'},{analytic:.6g}")


if __name__ == "__main__":
    main()
