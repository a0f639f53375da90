"""RINCE-in with ranks from noisy superclass similarity, thresholds around the gap midpoint.

    python scripts/run_noisy_threshold.py --offsets -0.1 0 0.1 --sigma-noise 0.05
"""
import json

from _common import dump, parser, table

from rince_lab.experiments import holdout_comparison, mean_of, noisy_threshold_sweep, summarize_runs


def main():
    p = parser(__doc__.splitlines()[0], epochs=100)
    p.add_argument("--offsets", type=float, nargs="+", default=[-0.1, 0.0, 0.1])
    p.add_argument("--sigma-noise", type=float, default=0.05)
    p.add_argument("--no-baseline", action="store_true", help="skip the SCL-in reference runs")
    p.add_argument("--data-spec", type=json.loads, default=None,
                   help='hierarchy overrides as JSON, e.g. \'{"sigma_super": 0.15}\'')
    args = p.parse_args()

    sweep = noisy_threshold_sweep(args.seeds, epochs=args.epochs, offsets=args.offsets, sigma_noise=args.sigma_noise,
                                  data_spec=args.data_spec)
    rows = [(f"{o:+.2f}", mean_of(runs, "r1_super"), mean_of(runs, "r1_fine"), mean_of(runs, "auroc"))
            for o, runs in sweep.items()]
    groups = {f"offset{o:+.2f}": runs for o, runs in sweep.items()}
    if not args.no_baseline:
        scl = holdout_comparison(args.seeds, epochs=args.epochs, data_spec=args.data_spec)["scl_in"]
        rows.append(("scl_in", mean_of(scl, "r1_super"), mean_of(scl, "r1_fine"), mean_of(scl, "auroc")))
        groups["scl_in"] = scl
    table(rows, ["threshold", "r1_super", "r1_fine", "auroc"])
    dump(summarize_runs(groups), args.out)


if __name__ == "__main__":
    main()
