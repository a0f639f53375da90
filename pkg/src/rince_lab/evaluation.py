"""Measurements on frozen features: linear probe, retrieval, Gaussian OOD, similarity structure."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from .numeric import cholesky, cosine_matrix, mvn_log_density_rows, normalize_rows, regularize_covariance

# -- linear probe -------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.5
    momentum: float = 0.9
    decay_epochs: tuple[int, ...] = (60, 75, 90)
    decay: float = 0.2
    weight_decay: float = 0.0


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_linear_probe(features: np.ndarray, labels: np.ndarray, cfg: ProbeConfig = ProbeConfig()):
    """Full-batch multinomial logistic regression; returns (W, b, classes, center, scale).

    Features are centered and divided by their RMS norm, which keeps the fit
    equivariant under rotations of the feature space.
    """
    x = np.asarray(features, dtype=np.float64)
    classes, y = np.unique(np.asarray(labels), return_inverse=True)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes")
    center = x.mean(axis=0)
    xc = x - center
    scale = math.sqrt(float((xc * xc).sum(axis=1).mean())) or 1.0
    xc = xc / scale
    n, d = xc.shape
    k = classes.size
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    W = np.zeros((d, k))
    b = np.zeros(k)
    vW, vb = np.zeros_like(W), np.zeros_like(b)
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        if epoch in cfg.decay_epochs:
            lr *= cfg.decay
        p = _softmax(xc @ W + b)
        g = (p - onehot) / n
        gW = xc.T @ g + cfg.weight_decay * W
        gb = g.sum(axis=0)
        vW = cfg.momentum * vW + gW
        vb = cfg.momentum * vb + gb
        W -= lr * vW
        b -= lr * vb
    return W, b, classes, center, scale


def linear_probe(train_x, train_y, test_x, test_y, cfg: ProbeConfig = ProbeConfig()) -> float:
    """Held-out accuracy of a linear classifier on frozen features."""
    W, b, classes, center, scale = fit_linear_probe(train_x, train_y, cfg)
    logits = ((np.asarray(test_x, dtype=np.float64) - center) / scale) @ W + b
    pred = classes[np.argmax(logits, axis=1)]
    return float(np.mean(pred == np.asarray(test_y)))


# -- retrieval ------------------------------------------------------------------------------


def average_precision(relevant_in_rank_order) -> float:
    """AP of one ranking given a boolean relevance vector in ranked order."""
    rel = np.asarray(relevant_in_rank_order, dtype=bool)
    if not rel.any():
        raise ValueError("average precision needs at least one relevant item")
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float(np.mean(hits[rel] / ranks))


@dataclass
class RetrievalResult:
    r_at_1: float
    mean_ap: float
    recall_grid: np.ndarray
    precision: np.ndarray  # mean interpolated precision at each recall level
    skipped: int


def retrieval(features: np.ndarray, labels: np.ndarray, recall_points: int = 11) -> RetrievalResult:
    """Cosine nearest-neighbour retrieval over all other samples.

    Similarities equal to 12 decimals count as ties and are broken by sample
    index; matmul rounding alone would otherwise order duplicate samples.
    Queries without another sample of their label are skipped with a warning.
    """
    labels = np.asarray(labels)
    sim = np.round(cosine_matrix(np.asarray(features, dtype=np.float64)), 12)
    n = sim.shape[0]
    if n < 2:
        raise ValueError("retrieval needs at least two samples")
    np.fill_diagonal(sim, -np.inf)
    order = np.argsort(-sim, axis=1, kind="stable")[:, : n - 1]
    rel = labels[order] == labels[:, None]
    has = rel.any(axis=1)
    skipped = int((~has).sum())
    if skipped:
        warnings.warn(f"retrieval: {skipped} queries have no same-label sample and were skipped", stacklevel=2)
    if not has.any():
        raise ValueError("no query has a same-label sample")
    rel = rel[has]
    hits = np.cumsum(rel, axis=1)
    pos = np.arange(1, n)[None, :]
    prec = hits / pos
    n_rel = rel.sum(axis=1)
    ap = (prec * rel).sum(axis=1) / n_rel
    recall = hits / n_rel[:, None]
    # interpolated precision: best precision at recall >= level
    interp = np.maximum.accumulate(prec[:, ::-1], axis=1)[:, ::-1]
    grid = np.linspace(0.0, 1.0, recall_points)
    curve = np.empty(recall_points)
    for j, level in enumerate(grid):
        idx = np.argmax(recall >= level - 1e-12, axis=1)
        curve[j] = interp[np.arange(rel.shape[0]), idx].mean()
    return RetrievalResult(float(rel[:, 0].mean()), float(ap.mean()), grid, curve, skipped)


# -- OOD --------------------------------------------------------------------------------------


@dataclass
class GaussianClassModel:
    classes: np.ndarray
    means: np.ndarray  # (C, d)
    chols: np.ndarray  # (C, d, d)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def fit_ood_model(features: np.ndarray, labels: np.ndarray, covariance: str = "full",
                  rel: float = 1e-6) -> GaussianClassModel:
    """Per-class sample mean and regularized sample covariance (ddof=1)."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    d = x.shape[1]
    means, chols = [], []
    for c in classes:
        xc = x[labels == c]
        mu = xc.mean(axis=0)
        if xc.shape[0] > 1:
            cov = np.cov(xc, rowvar=False, ddof=1).reshape(d, d)
        else:
            cov = np.zeros((d, d))
        if covariance == "diag":
            cov = np.diag(np.diag(cov))
        elif covariance != "full":
            raise ValueError(f"covariance must be 'full' or 'diag', got {covariance!r}")
        means.append(mu)
        chols.append(cholesky(regularize_covariance(cov, rel)))
    return GaussianClassModel(classes, np.array(means), np.array(chols))


def ood_scores(model: GaussianClassModel, x: np.ndarray) -> np.ndarray:
    """Max over classes of the Gaussian log-density, one score per row."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.dim:
        raise ValueError(f"feature dimension {x.shape[1]} != model dimension {model.dim}")
    dens = np.stack([mvn_log_density_rows(x, m, L) for m, L in zip(model.means, model.chols)])
    return dens.max(axis=0)


def ood_score(model: GaussianClassModel, x) -> float:
    return float(ood_scores(model, np.asarray(x, dtype=np.float64)[None, :])[0])


def auroc(inlier_scores, outlier_scores) -> float:
    """P(inlier score > outlier score) with ties counted one half."""
    a = np.asarray(inlier_scores, dtype=np.float64).ravel()
    b = np.asarray(outlier_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("auroc needs nonempty inlier and outlier sets")
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


# -- similarity structure -------------------------------------------------------------------


def class_similarity_matrix(features: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean pairwise cosine between class sample sets; returns (matrix, class ids).

    Diagonal entries average over distinct within-class pairs; a class with a
    single sample gets 1.0.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    u = normalize_rows(np.asarray(features, dtype=np.float64))
    onehot = (labels[:, None] == classes[None, :]).astype(np.float64)
    counts = onehot.sum(axis=0)
    sums = onehot.T @ u  # per-class sum of unit vectors
    total = sums @ sums.T
    m = total / np.outer(counts, counts)
    self_sim = np.einsum("ij,ij->i", u, u)
    diag_self = onehot.T @ self_sim
    pairs = counts * (counts - 1)
    within = np.where(pairs > 0, (np.diag(total) - diag_self) / np.where(pairs > 0, pairs, 1), 1.0)
    np.fill_diagonal(m, within)
    m = 0.5 * (m + m.T)
    return m, classes


def block_means(sim: np.ndarray, classes_per_superclass: int, classes: np.ndarray | None = None):
    """(within-class, within-superclass, cross-superclass) means of a class similarity matrix."""
    n = sim.shape[0]
    ids = np.arange(n) if classes is None else np.asarray(classes)
    sup = ids // classes_per_superclass
    eye = np.eye(n, dtype=bool)
    same = (sup[:, None] == sup[None, :]) & ~eye
    cross = sup[:, None] != sup[None, :]
    within = float(np.diag(sim).mean())
    s = float(sim[same].mean()) if same.any() else float("nan")
    c = float(sim[cross].mean()) if cross.any() else float("nan")
    return within, s, c


def alignment_uniformity(pair_a: np.ndarray, pair_b: np.ndarray, all_features: np.ndarray, t: float = 2.0):
    """Alignment: mean squared distance of unit positive pairs.
    Uniformity: log mean exp(-t * squared distance) over distinct unit pairs.
    """
    x = normalize_rows(np.asarray(all_features, dtype=np.float64))
    if x.shape[0] < 2:
        raise ValueError("uniformity needs at least two samples")
    a = normalize_rows(np.asarray(pair_a, dtype=np.float64))
    b = normalize_rows(np.asarray(pair_b, dtype=np.float64))
    align = float(np.mean(((a - b) ** 2).sum(axis=1))) if a.size else float("nan")
    g = x @ x.T
    iu = np.triu_indices(x.shape[0], 1)
    sq = np.maximum(2.0 - 2.0 * g[iu], 0.0)
    unif = float(logsumexp(-t * sq) - math.log(sq.size))
    return align, unif


def label_pairs(labels: np.ndarray, coarse: np.ndarray | None = None, max_pairs: int | None = None, rng=None):
    """Index pairs (i<j) sharing ``labels``; with ``coarse``, pairs sharing ``coarse`` but not ``labels``."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    if coarse is not None:
        coarse = np.asarray(coarse)
        same = (coarse[:, None] == coarse[None, :]) & ~same
    i, j = np.nonzero(np.triu(same, 1))
    if max_pairs is not None and i.size > max_pairs:
        if rng is None:
            raise ValueError("subsampling pairs needs an rng")
        pick = np.sort(rng.choice(i.size, size=max_pairs, replace=False))
        i, j = i[pick], j[pick]
    return i, j


# -- reports ------------------------------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(report), indent=1, sort_keys=True) + "\n", encoding="utf-8")


LEADERBOARD_COLUMNS = ("run_id", "variant", "seed", "accuracy", "r1_fine", "r1_super", "map",
                       "auroc", "alignment", "uniformity")


def append_leaderboard(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(LEADERBOARD_COLUMNS)
        w.writerow(["" if row.get(c) is None else row.get(c) for c in LEADERBOARD_COLUMNS])
