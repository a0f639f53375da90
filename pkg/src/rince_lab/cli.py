"""Command line entry point: gen-data, train, eval, analyze, sweep.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .analysis import NegativeModel, equilibrium_curve, k_grid, write_curve_csv, write_grid_csv
from .data import (
    HierarchyDataset,
    HierarchySpec,
    SequenceDataset,
    SequenceSpec,
    SpecError,
    dump_csv,
    load_csv,
)
from .encoder import load_checkpoint, save_checkpoint
from .evaluation import append_leaderboard, write_report
from .numeric import NumericError
from .pipeline import DataConfig, EvalConfig, evaluate, make_dataset, training_set
from .training import ConfigError, TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

VARIANT_ALIASES = {
    "infonce": "infonce",
    "scl-in": "log_in",
    "scl-out": "log_out",
    "rince-uni": "rince_uni",
    "rince-in": "rince_in",
    "rince-out": "rince_out",
    "rince-out-in": "rince_out_in",
    "triplet": "triplet_ranked",
}

ANALYSIS_SETTINGS = ((0.1, 0.2), (0.1, 0.7), (0.2, 0.1))


class CliError(Exception):
    """User-facing input problem; maps to exit code 2."""


# -- config handling ----------------------------------------------------------------------


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CliError(f"{path}: file not found")
    text = path.read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as err:
        raise CliError(f"{path}: line {err.lineno}, column {err.colno}: {err.msg}") from None
    if not isinstance(obj, dict):
        raise CliError(f"{path}: top level must be a JSON object")
    return obj


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be a JSON object")
    return sec


def _strict(cls, d: dict, prefix: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{prefix}.{unknown[0]}", "unknown config field")
    return cls(**d)


def data_config(cfg: dict) -> DataConfig:
    return _strict(DataConfig, _section(cfg, "data"), "data")


def eval_config(cfg: dict) -> EvalConfig:
    return _strict(EvalConfig, _section(cfg, "eval"), "eval")


def train_config(cfg: dict, overrides: dict) -> TrainConfig:
    d = dict(_section(cfg, "train"))
    d.update({k: v for k, v in overrides.items() if v is not None})
    if "variant" in d:
        d["variant"] = VARIANT_ALIASES.get(d["variant"], d["variant"])
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"train.{unknown[0]}", "unknown config field")
    return TrainConfig(**d)


def parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise CliError(f"cannot parse comma-separated numbers from {text!r}") from None


def runs_root() -> Path:
    return Path(os.environ.get("RINCE_LAB_RUNS_DIR", "runs"))


def content_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- dataset files ------------------------------------------------------------------------


def save_dataset(ds, data_cfg: DataConfig, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    meta = data_cfg.to_dict()
    if isinstance(ds, HierarchyDataset):
        dump_csv(ds, out / "data.csv")
        meta["class_centers"] = ds.class_centers.tolist()
        files = [out / "data.csv"]
    else:
        with (out / "frames.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trajectory", "t"] + [f"f{i}" for i in range(ds.spec.dim)])
            for k in range(ds.frames.shape[0]):
                for t in range(ds.frames.shape[1]):
                    w.writerow([k, t] + [repr(float(v)) for v in ds.frames[k, t]])
        files = [out / "frames.csv"]
    _dump_json(meta, out / "dataset.json")
    return files + [out / "dataset.json"]


def load_dataset(path: Path):
    """Dataset directory written by gen-data; returns (dataset, identity dict)."""
    path = Path(path)
    meta = read_json(path / "dataset.json")
    kind = meta.get("kind")
    if kind == "hierarchy":
        spec = HierarchySpec(**meta["spec"])
        ds = load_csv(path / "data.csv", spec)
        if "class_centers" in meta:
            ds.class_centers = np.array(meta["class_centers"], dtype=np.float64)
        data_file = path / "data.csv"
    elif kind == "sequence":
        spec = SequenceSpec(**meta["spec"])
        with (path / "frames.csv").open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[1:]
        frames = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(spec.num_trajectories, spec.length, spec.dim)
        ds = SequenceDataset(frames, spec)
        data_file = path / "frames.csv"
    else:
        raise CliError(f"{path / 'dataset.json'}: unknown dataset kind {kind!r}")
    digest = hashlib.sha256(data_file.read_bytes()).hexdigest()
    return ds, {"sha256": digest}


# -- commands --------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = read_json(args.config) if args.config else {}
    dc = data_config(cfg)
    if args.seed is not None:
        dc = DataConfig(dc.kind, args.seed, dc.spec)
    ds = make_dataset(dc)
    files = save_dataset(ds, dc, Path(args.out))
    for f in files:
        print(f)
    return EXIT_OK


def _train_overrides(args) -> dict:
    return {
        "variant": args.variant,
        "taus": parse_floats(args.taus) if args.taus else None,
        "allow_unordered": True if args.allow_unordered_taus else None,
        "rank_source": args.rank_source,
        "threshold": args.theta,
        "seed": args.seed,
        "epochs": args.epochs,
        "seq_scheme": args.seq_scheme,
    }


def prepare_run(cfg: dict, overrides: dict, data_dir: str | None):
    tc = train_config(cfg, overrides)
    ec = eval_config(cfg)
    if data_dir:
        ds, identity = load_dataset(Path(data_dir))
        identity = dict(identity, path=str(Path(data_dir).resolve()))
    else:
        dc = data_config(cfg)
        ds, identity = make_dataset(dc), dc.to_dict()
    if (tc.task == "sequence") != isinstance(ds, SequenceDataset):
        raise ConfigError("train.task", "does not match the dataset kind")
    return tc, ec, ds, identity


def execute_run(tc: TrainConfig, ec: EvalConfig, ds, identity: dict, do_eval: bool = False,
                leaderboard: Path | None = None) -> Path:
    snapshot = {"data": identity, "train": tc.to_dict(), "eval": asdict(ec)}
    # the dataset location is not part of the run identity, only its content
    hashed = dict(snapshot, data={k: v for k, v in identity.items() if k != "path"})
    run_id = content_hash(hashed)
    out = runs_root() / run_id
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    state, log, trainer = train(tc, training_set(ds, ec), return_trainer=True)
    save_checkpoint(state, out / "checkpoint.json", rng_state=_jsonable_state(trainer.rng.state()),
                    extra={"run_id": run_id, "epochs": tc.epochs})
    log.write_csv(out / "train_log.csv")
    _dump_json(snapshot, out / "config.json")
    manifest = {
        "run_id": run_id,
        "config": snapshot,
        "git": git_describe(),
        "started": started,
        "finished": _now(),
        "outputs": {"checkpoint": "checkpoint.json", "train_log": "train_log.csv", "config": "config.json"},
    }
    if do_eval:
        report = evaluate(state, ds, ec)
        report = {"run_id": run_id, "variant": tc.variant, "seed": tc.seed, "metrics": report}
        write_report(report, out / "report.json")
        manifest["outputs"]["report"] = "report.json"
        if leaderboard is not None:
            append_leaderboard(leaderboard, _leaderboard_row(report))
    _dump_json(manifest, out / "manifest.json")
    return out


def _jsonable_state(state: dict) -> dict:
    return json.loads(json.dumps(state, default=lambda o: o.tolist() if hasattr(o, "tolist") else int(o)))


def cmd_train(args) -> int:
    cfg = read_json(args.config) if args.config else {}
    tc, ec, ds, identity = prepare_run(cfg, _train_overrides(args), args.data)
    out = execute_run(tc, ec, ds, identity)
    print(out)
    return EXIT_OK


def _leaderboard_row(report: dict) -> dict:
    m = report["metrics"]
    return {
        "run_id": report.get("run_id"),
        "variant": report.get("variant"),
        "seed": report.get("seed"),
        "accuracy": m.get("probe_accuracy"),
        "r1_fine": m.get("r1_fine", m.get("traj_r1")),
        "r1_super": m.get("r1_super"),
        "map": m.get("map_fine", m.get("traj_map")),
        "auroc": m.get("auroc"),
        "alignment": m.get("alignment_fine"),
        "uniformity": m.get("uniformity"),
    }


def cmd_eval(args) -> int:
    if args.run:
        run = Path(args.run)
        ck = run / "checkpoint.json"
        snapshot = read_json(run / "config.json")
        ec = _strict(EvalConfig, snapshot.get("eval", {}), "eval")
        data = snapshot["data"]
        if args.data:
            ds, _ = load_dataset(Path(args.data))
        elif "sha256" in data:
            ds, _ = load_dataset(Path(data["path"]))
        else:
            ds = make_dataset(_strict(DataConfig, {k: data[k] for k in ("kind", "seed", "spec")}, "data"))
        tc = TrainConfig.from_dict(snapshot["train"])
        out = Path(args.out) if args.out else run / "report.json"
        meta = {"run_id": run.name, "variant": tc.variant, "seed": tc.seed}
    else:
        if not args.checkpoint or not args.data:
            raise CliError("eval needs --run DIR or both --checkpoint and --data")
        ck = Path(args.checkpoint)
        ds, _ = load_dataset(Path(args.data))
        ec = eval_config(read_json(args.config)) if args.config else EvalConfig()
        out = Path(args.out) if args.out else ck.with_name("report.json")
        meta = {"run_id": None, "variant": None, "seed": None}
    if not ck.exists():
        raise CliError(f"{ck}: checkpoint not found")
    state, blob = load_checkpoint(ck)
    if args.holdout_superclass is not None:
        ec = EvalConfig(**{**asdict(ec), "holdout_superclass": args.holdout_superclass})
    report = dict(meta, metrics=evaluate(state, ds, ec))
    write_report(report, out)
    lb = Path(args.leaderboard) if args.leaderboard else runs_root() / "leaderboard.csv"
    lb.parent.mkdir(parents=True, exist_ok=True)
    append_leaderboard(lb, _leaderboard_row(report))
    print(out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = read_json(args.config) if args.config else {}
    count = int(cfg.get("count", args.count))
    mode = cfg.get("mode", args.mode)
    seed = int(cfg.get("seed", 0))
    step = float(cfg.get("step", args.step))
    settings = [tuple(map(float, s)) for s in cfg.get("settings", ANALYSIS_SETTINGS)]
    if step <= 0 or step > 2:
        raise ConfigError("step", "must lie in (0, 2]")
    n = int(round(2.0 / step)) + 1
    grid = np.linspace(-1.0, 1.0, n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = NegativeModel(count=count, seed=seed, mode=mode)
    neg, lw = model.draw()
    for t1, t2 in settings:
        tag = f"tau1_{t1:g}_tau2_{t2:g}"
        curve = equilibrium_curve(t1, t2, grid, model)
        write_curve_csv(curve, out / f"curve_{tag}.csv")
        if not args.no_grid:
            write_grid_csv(grid, grid, k_grid(t1, t2, grid, grid, neg, lw), out / f"kgrid_{tag}.csv")
        print(out / f"curve_{tag}.csv")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = read_json(args.config)
    sweep = _section(cfg, "sweep")
    seeds = sweep.get("seeds", [123, 546, 937])
    variants = sweep.get("variants", [{}])
    if not isinstance(variants, list) or not isinstance(seeds, list):
        raise ConfigError("sweep", "seeds and variants must be lists")
    jobs = []
    for v in variants:
        if not isinstance(v, dict):
            raise ConfigError("sweep.variants", "entries must be objects of train overrides")
        for s in seeds:
            tc, ec, ds, identity = prepare_run(cfg, dict(v, seed=s), args.data)
            jobs.append((tc, ec, ds, identity))
    # jobs share the dataset read-only; each owns its config and RNG streams
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        outs = list(pool.map(lambda j: execute_run(*j, do_eval=True), jobs))
    lb = Path(args.leaderboard) if args.leaderboard else runs_root() / "leaderboard.csv"
    lb.parent.mkdir(parents=True, exist_ok=True)
    for out in outs:
        append_leaderboard(lb, _leaderboard_row(read_json(out / "report.json")))
        print(out)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rince-lab", description="Ranking InfoNCE laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", help="JSON config with a 'data' section")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    def train_flags(sp):
        sp.add_argument("--config", help="JSON config with data/train/eval sections")
        sp.add_argument("--data", help="dataset directory from gen-data (default: generate from config)")
        sp.add_argument("--variant", choices=sorted(VARIANT_ALIASES))
        sp.add_argument("--taus", help="comma-separated temperatures, e.g. 0.1,0.225")
        sp.add_argument("--allow-unordered-taus", action="store_true")
        sp.add_argument("--rank-source", choices=["exact", "noisy"])
        sp.add_argument("--theta", type=float, help="similarity threshold for noisy ranks")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seq-scheme", choices=["ranked", "hard_positive", "hard_negative", "frame"])

    t = sub.add_parser("train", help="train an encoder; writes runs/<id>/")
    train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--run", help="run directory from train")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--config", help="JSON config with an 'eval' section")
    e.add_argument("--holdout-superclass", type=int)
    e.add_argument("--out", help="report path (default: next to the checkpoint)")
    e.add_argument("--leaderboard", help="leaderboard CSV (default: $RINCE_LAB_RUNS_DIR/leaderboard.csv)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="equilibrium curves and K grids")
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--step", type=float, default=0.01)
    a.add_argument("--count", type=int, default=64)
    a.add_argument("--mode", choices=["sample", "expectation"], default="sample")
    a.add_argument("--no-grid", action="store_true", help="skip the K grid files")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sweep", help="train and evaluate seeds x variants in parallel")
    s.add_argument("--config", required=True, help="JSON config with a 'sweep' section")
    s.add_argument("--data")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--leaderboard")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, SpecError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
