"""Three-rank RINCE-uni against single-rank baselines on the drifting-sequence data.

    python scripts/run_temporal.py --epochs 100
"""
from _common import dump, parser, table

from rince_lab.experiments import TEMPORAL_METHODS, mean_of, summarize_runs, temporal_comparison


def main():
    p = parser(__doc__.splitlines()[0], epochs=100)
    p.add_argument("--methods", nargs="+", default=list(TEMPORAL_METHODS), choices=list(TEMPORAL_METHODS))
    args = p.parse_args()
    res = temporal_comparison(args.seeds, epochs=args.epochs, methods=tuple(args.methods))
    table([(m, mean_of(runs, "traj_map"), mean_of(runs, "traj_r1")) for m, runs in res.items()],
          ["method", "traj_map", "traj_r1"])
    dump(summarize_runs(res), args.out)


if __name__ == "__main__":
    main()
