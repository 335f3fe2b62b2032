"""Classroom example: instructor probability and workload for a 5-minute review.

    python scripts/classroom_example.py --minutes 5 --students 100 --reviews 5
"""

import argparse

from peergrade.assignment import coverage_probability, min_instructor_workload
from peergrade.bounds import min_p_for_truthfulness, review_cost


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--minutes", type=float, default=5.0)
    ap.add_argument("--alpha", type=float, default=0.25)
    ap.add_argument("--sigma", type=float, default=1.0)
    ap.add_argument("--weight", type=float, default=0.75)
    ap.add_argument("--students", type=int, default=100)
    ap.add_argument("--reviews", type=int, default=5)
    args = ap.parse_args()

    C = review_cost(args.minutes, args.weight)
    p = min_p_for_truthfulness(C, args.alpha, args.sigma).value
    k = min_instructor_workload(args.students, args.reviews, p)
    print(f"review cost C = {C:.6g}")
    print(f"required instructor probability p > {p:.6g}")
    print(f"instructor grades k = {k} of {args.students} submissions "
          f"(coverage {coverage_probability(args.students, args.reviews, k):.6g}; "
          f"k-1 gives {coverage_probability(args.students, args.reviews, k - 1):.6g})")


if __name__ == "__main__":
    main()
