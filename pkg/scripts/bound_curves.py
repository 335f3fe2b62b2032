"""Write the instructor-probability and tree variance-bound curves as CSV,
plus PNG plots when matplotlib is available.

    python scripts/bound_curves.py --out-dir results/curves
"""

import argparse
from pathlib import Path

import numpy as np

from peergrade.bounds import min_p_curve, variance_bound_curves, write_curve_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="results/curves")
    ap.add_argument("--K", type=float, default=5)
    ap.add_argument("--minutes", type=float, nargs="+", default=[5, 10, 20, 30])
    ap.add_argument("--plot", action="store_true", help="also save PNG figures")
    args = ap.parse_args()
    out = Path(args.out_dir)

    p_rows = min_p_curve(np.linspace(0, 30, 61))
    write_curve_csv(out / "min_p_vs_minutes.csv", p_rows)
    v_curves = variance_bound_curves(args.minutes, K=args.K)
    for m, rows in v_curves.items():
        write_curve_csv(out / f"variance_bound_{m:g}min.csv", rows)
    print(f"curves written to {out}")

    if args.plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(*zip(*p_rows))
        ax.set_xlabel("review time (minutes)")
        ax.set_ylabel("minimum instructor probability")
        fig.tight_layout()
        fig.savefig(out / "min_p_vs_minutes.png", dpi=150)

        fig, ax = plt.subplots(figsize=(4, 3))
        for m, rows in v_curves.items():
            ax.plot(*zip(*rows), label=f"{m:g} min")
        ax.set_xlabel("mean quality")
        ax.set_ylabel("minimum quality variance")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "variance_bound.png", dpi=150)


if __name__ == "__main__":
    main()
