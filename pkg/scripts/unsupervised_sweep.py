"""Truthful versus constant-plus-noise grading under the variance-penalized loss.

    python scripts/unsupervised_sweep.py --replicates 100000 --threads 4
"""

import argparse
import csv
import sys

from peergrade.dynamics import compare_truthful_vs_constant_noise


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=5)
    ap.add_argument("--sigmaq2", type=float, default=1.0)
    ap.add_argument("--cost", type=float, default=0.0)
    ap.add_argument("--variant", choices=["local", "global"], default="local")
    ap.add_argument("--gammas", type=float, nargs="+", default=[0.25, 0.5, 0.75])
    ap.add_argument("--eta2-ratios", type=float, nargs="+", default=[0.25, 1.0, 4.0])
    ap.add_argument("--replicates", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    w = csv.writer(sys.stdout)
    w.writerow(["gamma", "eta2", "gamma_range", "truthful", "truthful_se", "truthful_analytic",
                "const_noise", "deta_se", "const_noise_analytic", "status"])
    for g in args.gammas:
        for r in args.eta2_ratios:
            c = compare_truthful_vs_constant_noise(r * args.sigmaq2, g, args.n, args.sigmaq2, args.variant, args.cost,
                                         replicates=args.replicates, seed=args.seed, threads=args.threads)
            w.writerow([g, r * args.sigmaq2, c.gamma_range, f"{c.truthful.estimate:.6g}",
                        f"{c.truthful.std_error:.3g}", f"{c.truthful_analytic:.6g}", f"{c.const_noise.estimate:.6g}",
                        f"{c.const_noise.std_error:.3g}", f"{c.const_noise_analytic:.6g}", c.status])


if __name__ == "__main__":
    main()
