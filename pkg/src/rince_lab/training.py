"""Deterministic MoCo-style training loop for the RINCE family and its baselines.

Each step draws a minibatch, encodes an augmented query view with the online
encoder and a second view with the momentum encoder, scores queries against
in-batch keys plus a FIFO memory bank, assigns rank codes from labels, and
backpropagates the batched loss. Keys never receive gradient.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (
    HierarchyDataset,
    SequenceDataset,
    assign_ranks_noisy,
    augment_rows,
    class_center_similarity,
    rank2_matrix,
)
from .encoder import (
    EncoderState,
    MlpSpec,
    backward,
    cosine_backward,
    forward_batch,
    momentum_update,
)
from .losses import (
    NEG,
    RINCE_VARIANTS,
    VARIANTS,
    SimilarityBatch,
    TemperatureSchedule,
    batched_loss,
    batched_triplet,
)
from .numeric import NumericError, SeededRng

SEQ_SCHEMES = ("ranked", "hard_positive", "hard_negative", "frame")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class TrainingDiverged(NumericError):
    pass


# -- memory bank ----------------------------------------------------------------------


class MemoryBank:
    """Fixed-capacity FIFO of unit key embeddings with class and superclass labels."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 0 or dim < 1:
            raise ValueError("bank capacity must be >= 0 and dim >= 1")
        self.capacity = int(capacity)
        self.keys = np.zeros((capacity, dim))
        self.classes = np.zeros(capacity, dtype=np.int64)
        self.superclasses = np.zeros(capacity, dtype=np.int64)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def enqueue(self, keys: np.ndarray, classes, superclasses) -> None:
        keys = np.atleast_2d(keys)
        classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (keys.shape[0],))
        superclasses = np.broadcast_to(np.asarray(superclasses, dtype=np.int64), (keys.shape[0],))
        if self.capacity == 0:
            return
        # only the newest `capacity` rows can survive
        keys, classes, superclasses = keys[-self.capacity:], classes[-self.capacity:], superclasses[-self.capacity:]
        idx = (self.cursor + np.arange(keys.shape[0])) % self.capacity
        self.keys[idx] = keys
        self.classes[idx] = classes
        self.superclasses[idx] = superclasses
        self.cursor = int((self.cursor + keys.shape[0]) % self.capacity)
        self.size = min(self.capacity, self.size + keys.shape[0])

    def contents(self):
        """(keys, classes, superclasses) oldest first."""
        if self.size < self.capacity:
            order = np.arange(self.size)
        else:
            order = (self.cursor + np.arange(self.capacity)) % self.capacity
        return self.keys[order], self.classes[order], self.superclasses[order]

    def active(self):
        """Stored entries in storage order; cheaper than ``contents`` when order is irrelevant."""
        n = self.size
        return self.keys[:n], self.classes[:n], self.superclasses[:n]


# -- configuration --------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "rince_in"
    taus: tuple[float, ...] = (0.1, 0.225)
    allow_unordered: bool = False
    margins: tuple[float, ...] = (0.5, 1.0)
    lr: float = 0.05
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 200
    bank_size: int = 1024
    encoder_momentum: float = 0.99
    seed: int = 123
    rank_source: str = "exact"  # or "noisy"
    threshold: float = 0.45
    sigma_noise: float = 0.05
    in_batch_keys: bool = True
    aug_strength: float = 0.1
    hidden: tuple[int, ...] = (64,)
    feature_dim: int = 32
    head_hidden: int = 32
    proj_dim: int = 8
    task: str = "hierarchy"  # or "sequence"
    seq_scheme: str = "ranked"
    seq_samples_per_epoch: int = 512

    def __post_init__(self):
        object.__setattr__(self, "taus", tuple(float(t) for t in np.atleast_1d(self.taus)))
        object.__setattr__(self, "margins", tuple(float(m) for m in np.atleast_1d(self.margins)))
        object.__setattr__(self, "hidden", tuple(int(h) for h in np.atleast_1d(self.hidden)))
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant != "triplet_ranked":
            if not self.taus:
                raise ConfigError("taus", "need at least one temperature")
            try:
                TemperatureSchedule(self.taus, allow_unordered=self.allow_unordered)
            except ValueError as err:
                raise ConfigError("taus", str(err)) from None
        elif not self.margins or min(self.margins) <= 0:
            raise ConfigError("margins", "need positive margins")
        positive = ("lr", "batch_size", "feature_dim", "head_hidden", "proj_dim", "seq_samples_per_epoch")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        for name in ("epochs", "bank_size", "weight_decay", "aug_strength", "sigma_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ConfigError("sgd_momentum", "must lie in [0, 1)")
        if not 0.0 < self.encoder_momentum < 1.0:
            raise ConfigError("encoder_momentum", "must lie in (0, 1)")
        if self.rank_source not in ("exact", "noisy"):
            raise ConfigError("rank_source", "must be 'exact' or 'noisy'")
        if not -1.0 < self.threshold < 1.0:
            raise ConfigError("threshold", "must lie in (-1, 1)")
        if self.task not in ("hierarchy", "sequence"):
            raise ConfigError("task", "must be 'hierarchy' or 'sequence'")
        if self.seq_scheme not in SEQ_SCHEMES:
            raise ConfigError("seq_scheme", f"must be one of {SEQ_SCHEMES}")
        if self.task == "sequence" and self.seq_scheme == "ranked" and self.variant in RINCE_VARIANTS \
                and len(self.taus) != 3:
            raise ConfigError("taus", "ranked sequence training needs three temperatures")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden", "widths must be positive")

    @property
    def num_ranks(self) -> int:
        """Label ranks used for positives; 0 means instance discrimination."""
        if self.variant in RINCE_VARIANTS:
            return len(self.taus)
        if self.variant == "triplet_ranked":
            return len(self.margins)
        return 0 if self.variant == "infonce" else 1

    def mlp_spec(self, input_dim: int) -> MlpSpec:
        return MlpSpec((input_dim, *self.hidden, self.feature_dim), self.head_hidden, self.proj_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("taus", "margins", "hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown config field")
        return cls(**d)


# -- optimizer and schedule -----------------------------------------------------------


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 1e-4) -> None:
    """In place: v <- momentum*v + g + wd*theta; theta <- theta - lr*v."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericError(f"non-finite gradient in {k}: {bad} of {np.size(g)} entries")
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
    for k, g in grads.items():
        v = momentum * velocity[k] + g + weight_decay * params[k]
        velocity[k] = v
        params[k] = params[k] - lr * v


# -- rank codes -----------------------------------------------------------------------


def rank_codes(q_classes, q_supers, k_classes, k_supers, num_ranks: int,
               rank2: np.ndarray | None = None) -> np.ndarray:
    """(B, K) rank codes from labels.

    ``num_ranks`` 0: everything negative (instance discrimination).
    1: same class is rank 1. 2: additionally same superclass, or
    ``rank2[q_class, k_class]`` when a noisy rank table is given, is rank 2.
    """
    qc = np.asarray(q_classes)[:, None]
    kc = np.asarray(k_classes)[None, :]
    codes = np.full((qc.shape[0], kc.shape[1]), NEG, dtype=np.int64)
    if num_ranks >= 2:
        if rank2 is None:
            r2 = np.asarray(q_supers)[:, None] == np.asarray(k_supers)[None, :]
        else:
            r2 = rank2[qc, kc]
        codes[r2] = 2
    if num_ranks >= 1:
        codes[qc == kc] = 1
    return codes


def build_ranked_batch(query_class: int, query_super: int, self_score: float, bank: MemoryBank,
                       bank_scores: np.ndarray, num_ranks: int = 2,
                       rank2: np.ndarray | None = None) -> SimilarityBatch:
    """One query's scores grouped by rank; the augmented self view is always rank 1.

    Empty rank sets are legal here, so the batch skips the nonempty-rank check.
    """
    if len(bank) == 0:
        raise ValueError("memory bank is empty")
    _, kc, ks = bank.active()
    codes = rank_codes([query_class], [query_super], kc, ks, num_ranks, rank2)[0]
    scores = np.asarray(bank_scores, dtype=np.float64)
    if scores.shape != kc.shape:
        raise ValueError(f"expected {kc.size} bank scores, got {scores.shape}")
    if not (np.all(np.isfinite(scores)) and np.all(np.abs(scores) <= 1.0) and abs(self_score) <= 1.0):
        raise ValueError("scores must be finite and lie in [-1, 1]")
    ranks = [np.concatenate([[self_score], scores[codes == 1]])]
    for i in range(2, max(num_ranks, 1) + 1):
        ranks.append(scores[codes == i])
    return SimilarityBatch(ranks, scores[codes == NEG], check=False)


# -- training log -----------------------------------------------------------------------


@dataclass
class TrainLog:
    num_terms: int
    num_sim_ranks: int
    rows: list[dict] = field(default_factory=list)

    def columns(self) -> list[str]:
        return (["epoch", "loss"] + [f"l{i + 1}" for i in range(self.num_terms)]
                + [f"mean_sim_rank{i + 1}" for i in range(self.num_sim_ranks)] + ["mean_sim_neg", "lr"])

    def append(self, row: dict) -> None:
        if self.rows and row["epoch"] != self.rows[-1]["epoch"] + 1:
            raise ValueError("epochs must be appended in order")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    @property
    def final(self) -> dict:
        return self.rows[-1] if self.rows else {}

    def write_csv(self, path) -> None:
        cols = self.columns()
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r[c] if c == "epoch" else repr(float(r[c])) for c in cols])


# -- training ----------------------------------------------------------------------------


def _loss_and_grad(cfg: TrainConfig, scores: np.ndarray, codes: np.ndarray):
    if cfg.variant == "triplet_ranked":
        return batched_triplet(scores, codes, cfg.margins)
    taus = cfg.taus if cfg.variant in RINCE_VARIANTS else cfg.taus[:1]
    return batched_loss(scores, codes, cfg.variant, taus)


def _normalize(z: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(n == 0.0):
        raise NumericError("degenerate embedding: zero key projection")
    return z / n


class _Trainer:
    """Shared step machinery; subclasses define batches and rank codes."""

    sim_ranks = 2

    def __init__(self, cfg: TrainConfig, input_dim: int):
        self.cfg = cfg
        self.rng = SeededRng(cfg.seed)
        self.state = EncoderState.create(cfg.mlp_spec(input_dim), self.rng.stream("init"), cfg.encoder_momentum)
        self.velocity = {k: np.zeros_like(v) for k, v in self.state.params.items()}
        self.bank = MemoryBank(cfg.bank_size, cfg.proj_dim)
        terms = cfg.num_ranks if cfg.variant in RINCE_VARIANTS or cfg.variant == "triplet_ranked" else 1
        self.log = TrainLog(terms, self.sim_ranks)

    def step(self, xq: np.ndarray, keys: np.ndarray, codes: np.ndarray, truth: np.ndarray, lr: float):
        spec, params = self.state.spec, self.state.params
        _, zq, tape = forward_batch(spec, params, xq)
        uq = _normalize(zq)
        scores = np.clip(uq @ keys.T, -1.0, 1.0)
        values, g_scores, terms = _loss_and_grad(self.cfg, scores, codes)
        B = xq.shape[0]
        loss = float(values.mean())
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became non-finite ({loss})")
        grads = backward(spec, params, tape, cosine_backward(zq, keys, g_scores / B))
        sgd_step(params, grads, self.velocity, lr, self.cfg.sgd_momentum, self.cfg.weight_decay)
        momentum_update(self.state)
        sims = []
        for i in range(1, self.sim_ranks + 1):
            m = truth == i
            sims.append(float(scores[m].mean()) if m.any() else float("nan"))
        m = truth == NEG
        sims.append(float(scores[m].mean()) if m.any() else float("nan"))
        return loss, terms.mean(axis=0), np.array(sims)

    def record(self, epoch: int, losses, terms, sims, lr: float) -> None:
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        t = np.mean(terms, axis=0)
        for i in range(self.log.num_terms):
            row[f"l{i + 1}"] = float(t[i])
        with np.errstate(all="ignore"):
            s = np.nanmean(np.array(sims), axis=0) if len(sims) else np.full(self.sim_ranks + 1, np.nan)
        for i in range(self.sim_ranks):
            row[f"mean_sim_rank{i + 1}"] = float(s[i])
        row["mean_sim_neg"] = float(s[-1])
        row["lr"] = float(lr)
        self.log.append(row)


class _HierarchyTrainer(_Trainer):
    def __init__(self, cfg: TrainConfig, ds: HierarchyDataset):
        super().__init__(cfg, ds.x.shape[1])
        self.ds = ds
        self.rank2 = None
        if cfg.rank_source == "noisy" and cfg.num_ranks >= 2:
            if ds.class_centers is None:
                raise ConfigError("rank_source", "noisy ranks need class centers")
            sim = class_center_similarity(ds.class_centers, cfg.sigma_noise, self.rng.stream("ranks"))
            self.rank2 = rank2_matrix(assign_ranks_noisy(ds.class_centers, cfg.threshold, similarity=sim))

    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.ds) / self.cfg.batch_size)

    def run_epoch(self, epoch: int, step0: int, total: int) -> int:
        cfg, ds = self.cfg, self.ds
        order = self.rng.stream("batches").permutation(len(ds))
        aug = self.rng.stream("augment")
        losses, terms, sims = [], [], []
        lr = cfg.lr
        for s in range(0, len(ds), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            B = idx.size
            x = ds.x[idx]
            xq = augment_rows(x, cfg.aug_strength, aug)
            xk = augment_rows(x, cfg.aug_strength, aug)
            _, zk, _ = forward_batch(self.state.spec, self.state.momentum_params, xk)
            kb = _normalize(zk)
            qc, qs = ds.classes[idx], ds.superclasses[idx]
            bk, bc, bs = self.bank.active()
            keys = np.concatenate([kb, bk])
            kc = np.concatenate([qc, bc])
            ks = np.concatenate([qs, bs])
            codes = rank_codes(qc, qs, kc, ks, cfg.num_ranks, self.rank2)
            truth = rank_codes(qc, qs, kc, ks, 2)
            diag = np.arange(B)
            if not cfg.in_batch_keys:
                codes[:, :B] = 0
            codes[diag, diag] = 1
            truth[diag, diag] = 0
            lr = cosine_lr(step0, total, cfg.lr)
            loss, t, sm = self.step(xq, keys, codes, truth, lr)
            losses.append(loss)
            terms.append(t)
            sims.append(sm)
            self.bank.enqueue(kb, qc, qs)
            step0 += 1
        self.record(epoch, losses, terms, sims, lr)
        return step0


class _SequenceTrainer(_Trainer):
    sim_ranks = 3

    def __init__(self, cfg: TrainConfig, ds: SequenceDataset):
        super().__init__(cfg, ds.spec.dim)
        self.ds = ds

    def steps_per_epoch(self) -> int:
        return math.ceil(self.cfg.seq_samples_per_epoch / self.cfg.batch_size)

    def own_codes(self) -> tuple[int, int, int]:
        scheme = self.cfg.seq_scheme
        if scheme == "ranked":
            return (1, 2, 3)
        if scheme == "hard_positive":
            return (1, 1, 1)
        if scheme == "hard_negative":
            return (1, 1, NEG)
        return (1, 0, 0)

    def run_epoch(self, epoch: int, step0: int, total: int) -> int:
        cfg, ds = self.cfg, self.ds
        pick = self.rng.stream("batches")
        aug = self.rng.stream("augment")
        losses, terms, sims = [], [], []
        lr = cfg.lr
        own = self.own_codes()
        left = cfg.seq_samples_per_epoch
        while left > 0:
            B = min(cfg.batch_size, left)
            left -= B
            trajs, q, near, far = ds.sample_triplet_starts(pick, B)
            xq_raw = ds.clips(trajs, q)
            xq = augment_rows(xq_raw, cfg.aug_strength, aug)
            views = [augment_rows(xq_raw, cfg.aug_strength, aug),
                     augment_rows(ds.clips(trajs, near), cfg.aug_strength, aug),
                     augment_rows(ds.clips(trajs, far), cfg.aug_strength, aug)]
            _, zk, _ = forward_batch(self.state.spec, self.state.momentum_params, np.concatenate(views))
            kb = _normalize(zk)
            bk, bt, _ = self.bank.active()
            keys = np.concatenate([kb, bk])
            key_traj = np.concatenate([trajs, trajs, trajs, bt])
            same = trajs[:, None] == key_traj[None, :]
            codes = np.where(same, 0, NEG).astype(np.int64)
            truth = codes.copy()
            if not cfg.in_batch_keys:
                codes[:, :3 * B] = 0
            diag = np.arange(B)
            for j in range(3):
                codes[diag, j * B + diag] = own[j]
                truth[diag, j * B + diag] = j + 1
            lr = cosine_lr(step0, total, cfg.lr)
            loss, t, sm = self.step(xq, keys, codes, truth, lr)
            losses.append(loss)
            terms.append(t)
            sims.append(sm)
            self.bank.enqueue(kb[:B], trajs, trajs)
            step0 += 1
        self.record(epoch, losses, terms, sims, lr)
        return step0


def make_trainer(config: TrainConfig, dataset):
    if config.task == "sequence":
        if not isinstance(dataset, SequenceDataset):
            raise ConfigError("task", "sequence training needs a SequenceDataset")
        return _SequenceTrainer(config, dataset)
    if not isinstance(dataset, HierarchyDataset):
        raise ConfigError("task", "hierarchy training needs a HierarchyDataset")
    return _HierarchyTrainer(config, dataset)


def train(config: TrainConfig, dataset, return_trainer: bool = False):
    """Train from scratch; returns ``(EncoderState, TrainLog)``.

    With ``return_trainer=True`` the trainer object (bank, velocity, RNG
    streams) is returned as a third element, for checkpointing.
    """
    tr = make_trainer(config, dataset)
    total = config.epochs * tr.steps_per_epoch()
    step = 0
    for epoch in range(config.epochs):
        step = tr.run_epoch(epoch, step, total)
    if return_trainer:
        return tr.state, tr.log, tr
    return tr.state, tr.log
