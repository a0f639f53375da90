"""Desk-scale experiment protocols shared by the scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .analysis import NegativeModel, equilibrium_curve
from .pipeline import DataConfig, EvalConfig, make_dataset, midpoint_threshold, run_experiment, summarize
from .training import TrainConfig

SEEDS = (123, 546, 937)
RINCE_TAUS = (0.1, 0.225)
SCL_TAU = 0.1
SEQ_TAUS = (0.1, 0.15, 0.2)
HOLDOUT = 4


@dataclass
class RunResult:
    label: str
    seed: int
    report: dict
    final: dict  # last training-log row
    seconds: float


def run_one(label: str, data_cfg: DataConfig, train_cfg: TrainConfig, eval_cfg: EvalConfig, dataset=None):
    t0 = time.perf_counter()
    _, log, report = run_experiment(data_cfg, train_cfg, eval_cfg, dataset)
    return RunResult(label, train_cfg.seed, report, dict(log.final), time.perf_counter() - t0)


def rince_in(seed: int, epochs: int, **kw) -> TrainConfig:
    return TrainConfig(variant="rince_in", taus=RINCE_TAUS, epochs=epochs, seed=seed, **kw)


def scl_in(seed: int, epochs: int, **kw) -> TrainConfig:
    return TrainConfig(variant="log_in", taus=(SCL_TAU,), epochs=epochs, seed=seed, **kw)


def mean_of(runs, key: str) -> float:
    return float(np.mean([r.report[key] for r in runs]))


def ranking_emergence(seeds=SEEDS, epochs: int = 200) -> list[RunResult]:
    """RINCE-in on the default hierarchy; data and training share each seed."""
    out = []
    for s in seeds:
        dc = DataConfig("hierarchy", s)
        out.append(run_one("rince_in", dc, rince_in(s, epochs), EvalConfig()))
    return out


def holdout_comparison(seeds=SEEDS, epochs: int = 100, holdout: int = HOLDOUT,
                       data_spec: dict | None = None) -> dict[str, list[RunResult]]:
    """RINCE-in vs SCL-in with one superclass held out as the OOD set."""
    ec = EvalConfig(holdout_superclass=holdout)
    out = {"rince_in": [], "scl_in": []}
    for s in seeds:
        dc = DataConfig("hierarchy", s, dict(data_spec or {}))
        ds = make_dataset(dc)
        out["rince_in"].append(run_one("rince_in", dc, rince_in(s, epochs), ec, ds))
        out["scl_in"].append(run_one("scl_in", dc, scl_in(s, epochs), ec, ds))
    return out


def noisy_threshold_sweep(seeds=SEEDS, epochs: int = 100, offsets=(-0.1, 0.0, 0.1), sigma_noise: float = 0.05,
                          holdout: int = HOLDOUT, data_spec: dict | None = None) -> dict[float, list[RunResult]]:
    """RINCE-in with ranks from noisy center similarity thresholded around the gap midpoint."""
    ec = EvalConfig(holdout_superclass=holdout)
    out = {float(o): [] for o in offsets}
    for s in seeds:
        dc = DataConfig("hierarchy", s, dict(data_spec or {}))
        ds = make_dataset(dc)
        mid = midpoint_threshold(ds)
        for o in offsets:
            cfg = rince_in(s, epochs, rank_source="noisy", threshold=float(np.clip(mid + o, -0.99, 0.99)),
                           sigma_noise=sigma_noise)
            out[float(o)].append(run_one(f"rince_in_noisy{o:+.2f}", dc, cfg, ec, ds))
    return out


TEMPORAL_METHODS = {
    "rince_uni": dict(variant="rince_uni", taus=SEQ_TAUS, seq_scheme="ranked"),
    "hard_positive": dict(variant="log_in", taus=(SEQ_TAUS[0],), seq_scheme="hard_positive"),
    "hard_negative": dict(variant="log_in", taus=(SEQ_TAUS[0],), seq_scheme="hard_negative"),
    "infonce": dict(variant="infonce", taus=(SEQ_TAUS[0],), seq_scheme="frame"),
}


def temporal_comparison(seeds=SEEDS, epochs: int = 100, methods=tuple(TEMPORAL_METHODS)) -> dict[str, list[RunResult]]:
    out = {m: [] for m in methods}
    for s in seeds:
        dc = DataConfig("sequence", s)
        ds = make_dataset(dc)
        for m in methods:
            cfg = TrainConfig(task="sequence", epochs=epochs, seed=s, **TEMPORAL_METHODS[m])
            out[m].append(run_one(m, dc, cfg, EvalConfig(), ds))
    return out


EQUILIBRIUM_SETTINGS = ((0.1, 0.2), (0.1, 0.7), (0.2, 0.1))


def equilibrium_checks(model: NegativeModel | None = None, step: float = 0.01) -> dict:
    """The three equilibrium-curve comparisons over a shared h1 grid."""
    model = model or NegativeModel()
    grid = np.linspace(-1.0, 1.0, int(round(2.0 / step)) + 1)
    curves = {s: equilibrium_curve(*s, grid, model) for s in EQUILIBRIUM_SETTINGS}
    base, wide, flipped = (curves[s] for s in EQUILIBRIUM_SETTINGS)
    upper = base.h1 >= 0.5
    roots = base.h2_root[upper]
    below = bool(np.all(np.isfinite(roots)) and np.all(roots < base.h1[upper]))
    violations = base.h1[upper][~(roots < base.h1[upper])]
    both = base.has_root() & wide.has_root()
    slope_base = float(np.max(base.slopes(0.5, 1.0)))
    slope_flip = float(np.max(flipped.slopes(0.5, 1.0)))
    return {
        "curves": curves,
        "below_diagonal": below,
        "last_violation_h1": float(violations[-1]) if violations.size else None,
        "non_decreasing": base.is_non_decreasing(),
        "wide_below_base": bool(both.any() and np.all(wide.h2_root[both] < base.h2_root[both])),
        "slope_base": slope_base,
        "slope_flipped": slope_flip,
        "slope_ratio": slope_flip / slope_base,
    }



def summarize_runs(groups: dict) -> dict:
    """Per-group metric summaries (mean/min/max/values) over seeds, scalar metrics only."""
    out = {}
    for label, runs in groups.items():
        keys = [k for k, v in runs[0].report.items() if isinstance(v, (int, float))]
        out[str(label)] = {
            "seeds": [r.seed for r in runs],
            "seconds": [r.seconds for r in runs],
            "final_log": [r.final for r in runs],
            "metrics": {k: summarize([r.report[k] for r in runs]) for k in keys},
        }
    return out
