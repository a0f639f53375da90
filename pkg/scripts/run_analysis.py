"""Equilibrium-curve checks for the three temperature settings, optionally over many negative counts.

    python scripts/run_analysis.py --counts 8 16 32 64 128
"""
import argparse

from _common import table

from rince_lab.analysis import NegativeModel
from rince_lab.experiments import equilibrium_checks


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--counts", type=int, nargs="+", default=[64])
    p.add_argument("--mode", choices=["sample", "expectation"], default="sample")
    p.add_argument("--step", type=float, default=0.01)
    args = p.parse_args()
    rows = []
    for n in args.counts:
        c = equilibrium_checks(NegativeModel(count=n, mode=args.mode), step=args.step)
        last = c["last_violation_h1"]
        rows.append((n, str(c["below_diagonal"]), "-" if last is None else f"{last:.2f}",
                     str(c["non_decreasing"]), str(c["wide_below_base"]), c["slope_ratio"]))
    table(rows, ["negatives", "below_diag", "above_until", "monotone", "wide_below", "slope_ratio"])


if __name__ == "__main__":
    main()
