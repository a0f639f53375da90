"""Data, training and evaluation wired together; shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import (
    HierarchyDataset,
    HierarchySpec,
    SequenceDataset,
    SequenceSpec,
    SpecError,
    gen_hierarchy,
    gen_sequences,
    similarity_gap_midpoint,
)
from .encoder import EncoderState, embed
from .evaluation import (
    ProbeConfig,
    alignment_uniformity,
    auroc,
    block_means,
    class_similarity_matrix,
    fit_ood_model,
    label_pairs,
    linear_probe,
    ood_scores,
    retrieval,
)
from .numeric import make_rng
from .training import ConfigError, TrainConfig, train


@dataclass(frozen=True)
class DataConfig:
    kind: str = "hierarchy"  # or "sequence"
    seed: int = 0
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("hierarchy", "sequence"):
            raise ConfigError("data.kind", "must be 'hierarchy' or 'sequence'")
        allowed = {f.name for f in fields(HierarchySpec if self.kind == "hierarchy" else SequenceSpec)}
        unknown = sorted(set(self.spec) - allowed)
        if unknown:
            raise ConfigError(f"data.spec.{unknown[0]}", "unknown field")
        try:
            self.build_spec()
        except SpecError as err:
            raise ConfigError(f"data.spec.{err.field}", err.message) from None

    def build_spec(self):
        return (HierarchySpec if self.kind == "hierarchy" else SequenceSpec)(**self.spec)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "spec": asdict(self.build_spec())}


def make_dataset(cfg: DataConfig):
    rng = make_rng(cfg.seed, "data")
    if cfg.kind == "hierarchy":
        return gen_hierarchy(cfg.build_spec(), rng)
    return gen_sequences(cfg.build_spec(), rng)


@dataclass(frozen=True)
class EvalConfig:
    holdout_superclass: int | None = None
    test_fraction: float = 0.2
    covariance: str = "full"
    cov_reg: float = 1e-6
    probe_epochs: int = 100
    probe_lr: float = 0.5
    max_pairs: int = 20000
    clips_per_trajectory: int = 8

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("eval.test_fraction", "must lie in (0, 1)")
        if self.covariance not in ("full", "diag"):
            raise ConfigError("eval.covariance", "must be 'full' or 'diag'")
        if self.probe_epochs < 1 or self.max_pairs < 1 or self.clips_per_trajectory < 2:
            raise ConfigError("eval", "probe_epochs, max_pairs >= 1 and clips_per_trajectory >= 2")


@dataclass
class HierarchySplits:
    train: HierarchyDataset
    test: HierarchyDataset
    outliers: HierarchyDataset | None


def hierarchy_splits(ds: HierarchyDataset, cfg: EvalConfig) -> HierarchySplits:
    """Per-class train/test split; with a held-out superclass, its samples become outliers."""
    outliers = None
    base = ds
    if cfg.holdout_superclass is not None:
        if not 0 <= cfg.holdout_superclass < ds.spec.num_superclasses:
            raise ConfigError("eval.holdout_superclass", "out of range")
        base, outliers = ds.without_superclasses([cfg.holdout_superclass])
    train_ds, test_ds = base.split(cfg.test_fraction)
    return HierarchySplits(train_ds, test_ds, outliers)


def _round_curve(res):
    return {"recall": res.recall_grid, "precision": res.precision}


def evaluate_hierarchy(state: EncoderState, splits: HierarchySplits, cfg: EvalConfig) -> dict:
    tr, te = splits.train, splits.test
    ftr, fte = embed(state, tr.x), embed(state, te.x)
    C = tr.spec.classes_per_superclass
    probe = ProbeConfig(epochs=cfg.probe_epochs, lr=cfg.probe_lr)
    fine = retrieval(fte, te.classes)
    coarse = retrieval(fte, te.superclasses)
    report = {
        "probe_accuracy": linear_probe(ftr, tr.classes, fte, te.classes, probe),
        "r1_fine": fine.r_at_1,
        "r1_super": coarse.r_at_1,
        "map_fine": fine.mean_ap,
        "map_super": coarse.mean_ap,
        "pr_fine": _round_curve(fine),
        "pr_super": _round_curve(coarse),
    }
    for name, feats in (("pre_head", fte), ("post_head", embed(state, te.x, head=True))):
        sim, classes = class_similarity_matrix(feats, te.classes)
        w, s, c = block_means(sim, C, classes)
        report[f"similarity_{name}"] = {"within_class": w, "within_superclass": s, "cross": c}
    rng = make_rng(0, "eval-pairs")
    i, j = label_pairs(te.classes, max_pairs=cfg.max_pairs, rng=rng)
    a_fine, unif = alignment_uniformity(fte[i], fte[j], fte)
    i, j = label_pairs(te.classes, te.superclasses, max_pairs=cfg.max_pairs, rng=rng)
    a_coarse, _ = alignment_uniformity(fte[i], fte[j], fte)
    report.update(alignment_fine=a_fine, alignment_coarse=a_coarse, uniformity=unif)
    if splits.outliers is not None:
        model = fit_ood_model(ftr, tr.classes, cfg.covariance, cfg.cov_reg)
        s_in = ood_scores(model, fte)
        s_out = ood_scores(model, embed(state, splits.outliers.x))
        report["auroc"] = auroc(s_in, s_out)
    return report


def evaluate_sequence(state: EncoderState, ds: SequenceDataset, cfg: EvalConfig) -> dict:
    clips, ids = ds.eval_clips(cfg.clips_per_trajectory)
    res = retrieval(embed(state, clips), ids)
    return {"traj_map": res.mean_ap, "traj_r1": res.r_at_1, "pr_traj": _round_curve(res)}


def evaluate(state: EncoderState, dataset, cfg: EvalConfig) -> dict:
    if isinstance(dataset, SequenceDataset):
        return evaluate_sequence(state, dataset, cfg)
    return evaluate_hierarchy(state, hierarchy_splits(dataset, cfg), cfg)


def training_set(dataset, cfg: EvalConfig):
    if isinstance(dataset, SequenceDataset):
        return dataset
    return hierarchy_splits(dataset, cfg).train


def run_experiment(data_cfg: DataConfig, train_cfg: TrainConfig, eval_cfg: EvalConfig = EvalConfig(),
                   dataset=None):
    """Generate (or reuse) data, train on the training split, evaluate; returns (state, log, report)."""
    ds = make_dataset(data_cfg) if dataset is None else dataset
    if (train_cfg.task == "sequence") != isinstance(ds, SequenceDataset):
        raise ConfigError("train.task", f"task {train_cfg.task!r} does not match data kind")
    state, log = train(train_cfg, training_set(ds, eval_cfg))
    return state, log, evaluate(state, ds, eval_cfg)


def midpoint_threshold(ds: HierarchyDataset) -> float:
    return similarity_gap_midpoint(ds.class_centers, ds.spec.classes_per_superclass)


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "min": float(v.min()), "max": float(v.max()), "values": v.tolist()}
