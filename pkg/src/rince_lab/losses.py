"""Ranked InfoNCE losses with exact gradients with respect to similarity scores.

Every contrastive variant here is a sum of terms of one shape::

    term = -log( sum_{num} exp(s/tau) / sum_{num + rest} exp(s/tau) )

with ``num`` the positives in the numerator and ``rest`` the other entries of
the denominator. The variants differ only in how they pick ``num``/``rest``
and which temperature each term gets. Gradients are returned per score; the
encoder composes them with the chain rule through the critic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

VARIANTS = (
    "infonce",
    "log_out",
    "log_in",
    "rince_uni",
    "rince_in",
    "rince_out",
    "rince_out_in",
    "triplet_ranked",
)
RINCE_VARIANTS = ("rince_uni", "rince_in", "rince_out", "rince_out_in")

# Rank code for negatives in batched score tables; 0 marks an unused slot.
NEG = -1

# Distances on the unit sphere are floored here so d(sqrt)/ds stays finite.
_DIST_FLOOR_SQ = 1e-12


class LossInputError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityBatch:
    """Critic scores for one query: positives grouped by rank, then negatives."""

    positives_by_rank: tuple[tuple[float, ...], ...]
    negatives: tuple[float, ...] = ()
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        pos = tuple(tuple(float(v) for v in rank) for rank in self.positives_by_rank)
        neg = tuple(float(v) for v in self.negatives)
        object.__setattr__(self, "positives_by_rank", pos)
        object.__setattr__(self, "negatives", neg)
        if not self.check:
            return
        if len(pos) == 0:
            raise LossInputError("need at least one rank of positives")
        for i, rank in enumerate(pos, start=1):
            if len(rank) == 0:
                raise LossInputError(f"rank {i} has no positives")
        flat = self.flat()
        if not np.all(np.isfinite(flat)):
            raise LossInputError("scores must be finite")
        if np.any(np.abs(flat) > 1.0):
            raise LossInputError("scores must lie in [-1, 1]")

    @property
    def num_ranks(self) -> int:
        return len(self.positives_by_rank)

    @property
    def shape(self) -> tuple[tuple[int, ...], int]:
        return tuple(len(r) for r in self.positives_by_rank), len(self.negatives)

    def flat(self) -> np.ndarray:
        parts = [v for rank in self.positives_by_rank for v in rank]
        return np.array(parts + list(self.negatives), dtype=np.float64)

    def rank_slices(self) -> list[slice]:
        out, start = [], 0
        for rank in self.positives_by_rank:
            out.append(slice(start, start + len(rank)))
            start += len(rank)
        return out

    def negative_slice(self) -> slice:
        n_pos = sum(len(r) for r in self.positives_by_rank)
        return slice(n_pos, n_pos + len(self.negatives))

    def with_flat(self, values: np.ndarray, check: bool = False) -> "SimilarityBatch":
        pos = [tuple(values[s]) for s in self.rank_slices()]
        return SimilarityBatch(tuple(pos), tuple(values[self.negative_slice()]), check=check)


@dataclass(frozen=True)
class TemperatureSchedule:
    """Per-rank temperatures; strictly increasing unless explicitly allowed."""

    taus: tuple[float, ...]
    allow_unordered: bool = False

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        object.__setattr__(self, "taus", taus)
        if len(taus) == 0:
            raise LossInputError("temperature schedule is empty")
        if any(not np.isfinite(t) or t <= 0.0 for t in taus):
            raise LossInputError(f"temperatures must be positive, got {taus}")
        if not self.allow_unordered:
            for a, b in zip(taus, taus[1:]):
                if not a < b:
                    raise LossInputError(
                        f"temperatures must be strictly increasing per rank, got {taus}"
                    )

    def __len__(self):
        return len(self.taus)

    @classmethod
    def linear(cls, tau1: float, tau_last: float, num_ranks: int) -> "TemperatureSchedule":
        """Fix the first temperature and space the remaining ones linearly."""
        if num_ranks == 1:
            return cls((tau1,))
        return cls(tuple(np.linspace(tau1, tau_last, num_ranks)))


@dataclass
class LossResult:
    value: float
    grad_positives_by_rank: list[np.ndarray]
    grad_negatives: np.ndarray
    terms: tuple[float, ...] = ()

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([*self.grad_positives_by_rank, self.grad_negatives])


def _lse(x: np.ndarray) -> float:
    if x.size == 0:
        return -np.inf
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def _term(s: np.ndarray, num: np.ndarray, rest: np.ndarray, tau: float, grad: np.ndarray) -> float:
    """One contrastive term; accumulates its gradient into ``grad`` in place."""
    a = s[num] / tau
    b = s[rest] / tau
    lse_a = _lse(a)
    lse_b = _lse(b)
    if rest.size == 0:
        return 0.0
    gap = lse_b - lse_a
    value = float(np.logaddexp(0.0, gap))
    # share of the denominator held by ``rest``
    w = 1.0 / (1.0 + np.exp(-gap))
    grad[num] -= w * np.exp(a - lse_a) / tau
    grad[rest] += w * np.exp(b - lse_b) / tau
    return value


def _result(batch: SimilarityBatch, value: float, grad: np.ndarray, terms) -> LossResult:
    return LossResult(
        value=value,
        grad_positives_by_rank=[grad[s].copy() for s in batch.rank_slices()],
        grad_negatives=grad[batch.negative_slice()].copy(),
        terms=tuple(terms),
    )


def _indices(batch: SimilarityBatch):
    ranks = [np.arange(s.start, s.stop) for s in batch.rank_slices()]
    neg = batch.negative_slice()
    return ranks, np.arange(neg.start, neg.stop)


def _check_tau(tau: float):
    if not (np.isfinite(tau) and tau > 0.0):
        raise LossInputError(f"temperature must be positive, got {tau}")


def infonce(batch: SimilarityBatch, tau: float) -> LossResult:
    _check_tau(tau)
    if batch.num_ranks != 1 or len(batch.positives_by_rank[0]) != 1:
        raise LossInputError(
            "infonce takes exactly one positive; use log_in or log_out for several"
        )
    if len(batch.negatives) == 0:
        raise LossInputError("infonce needs at least one negative")
    return log_out(batch, tau)


def log_out(batch: SimilarityBatch, tau: float) -> LossResult:
    _check_tau(tau)
    if batch.num_ranks != 1:
        raise LossInputError("log_out takes a single rank of positives; use rince")
    s = batch.flat()
    (pos,), neg = _indices(batch)
    grad = np.zeros_like(s)
    value = 0.0
    for p in pos:
        value += _term(s, np.array([p]), neg, tau, grad)
    return _result(batch, value, grad, (value,))


def log_in(batch: SimilarityBatch, tau: float) -> LossResult:
    _check_tau(tau)
    if batch.num_ranks != 1:
        raise LossInputError("log_in takes a single rank of positives; use rince")
    s = batch.flat()
    (pos,), neg = _indices(batch)
    grad = np.zeros_like(s)
    value = _term(s, pos, neg, tau, grad)
    return _result(batch, value, grad, (value,))


def _rank_form(variant: str, i: int) -> str:
    if variant in ("rince_out", "rince_uni"):
        return "out"
    if variant == "rince_in":
        return "in"
    if variant == "rince_out_in":
        return "out" if i == 0 else "in"
    raise LossInputError(f"unknown RINCE variant {variant!r}")


def rince(batch: SimilarityBatch, sched: TemperatureSchedule, variant: str = "rince_in") -> LossResult:
    """Sum over ranks of per-rank terms; later ranks act as negatives for earlier ones.

    Rank ``i`` uses temperature ``taus[i]``; its denominator holds its own
    positives, every positive of a later rank and all negatives. Earlier
    ranks are dropped.
    """
    if not isinstance(sched, TemperatureSchedule):
        sched = TemperatureSchedule(tuple(sched))
    r = batch.num_ranks
    if len(sched) != r:
        raise LossInputError(f"{len(sched)} temperatures for {r} ranks")
    if variant == "rince_uni" and any(len(p) != 1 for p in batch.positives_by_rank):
        raise LossInputError("rince_uni takes exactly one positive per rank")
    s = batch.flat()
    ranks, neg = _indices(batch)
    grad = np.zeros_like(s)
    terms = []
    for i in range(r):
        tau = sched.taus[i]
        later = np.concatenate([*ranks[i + 1:], neg]).astype(int)
        if _rank_form(variant, i) == "in":
            terms.append(_term(s, ranks[i], later, tau, grad))
        else:
            t = 0.0
            for p in ranks[i]:
                t += _term(s, np.array([p]), later, tau, grad)
            terms.append(t)
    return _result(batch, float(sum(terms)), grad, terms)


def triplet_from_distances(pos_dists_by_rank, neg_dists, margins):
    """Ranked triplet hinge on distances.

    A rank-``i`` positive is paired with every later-rank positive and every
    negative, with margin ``margins[i]``. Returns the value and gradients
    with respect to the distances (subgradient 0 exactly at the hinge corner).
    """
    pos = [np.asarray(d, dtype=np.float64) for d in pos_dists_by_rank]
    neg = np.asarray(neg_dists, dtype=np.float64)
    if len(margins) != len(pos):
        raise LossInputError(f"{len(margins)} margins for {len(pos)} ranks")
    g_pos = [np.zeros_like(d) for d in pos]
    g_neg = np.zeros_like(neg)
    value = 0.0
    terms = []
    for i, dp in enumerate(pos):
        later = [*pos[i + 1:], neg]
        d_later = np.concatenate(later)
        h = dp[:, None] - d_later[None, :] + margins[i]
        active = h > 0.0
        t = float(h[active].sum())
        terms.append(t)
        value += t
        g_pos[i] += active.sum(axis=1)
        g_later = -active.sum(axis=0).astype(np.float64)
        start = 0
        for j, block in enumerate(later):
            stop = start + block.size
            if j < len(later) - 1:
                g_pos[i + 1 + j] += g_later[start:stop]
            else:
                g_neg += g_later[start:stop]
            start = stop
    return value, g_pos, g_neg, tuple(terms)


def sphere_distance(s: np.ndarray) -> np.ndarray:
    """Euclidean distance between unit vectors with cosine ``s``."""
    return np.sqrt(np.maximum(2.0 - 2.0 * np.asarray(s, dtype=np.float64), _DIST_FLOOR_SQ))


def triplet_ranked(batch: SimilarityBatch, margins: Sequence[float]) -> LossResult:
    """Ranked triplet hinge for unit-norm embeddings, differentiated w.r.t. scores."""
    pos_d = [sphere_distance(p) for p in batch.positives_by_rank]
    neg_d = sphere_distance(batch.negatives) if batch.negatives else np.zeros(0)
    value, g_pos, g_neg, terms = triplet_from_distances(pos_d, neg_d, margins)
    # d = sqrt(2 - 2s)  =>  dd/ds = -1/d
    gp = [g / -d for g, d in zip(g_pos, pos_d)]
    gn = g_neg / -neg_d if neg_d.size else g_neg
    return LossResult(value, gp, gn, terms)


def euclidean_distances(query, others) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    o = np.atleast_2d(np.asarray(others, dtype=np.float64))
    return np.linalg.norm(o - q[None, :], axis=1)


def compute_loss(variant: str, batch: SimilarityBatch, taus=None, margins=None) -> LossResult:
    """Dispatch by variant tag. Single-temperature variants use ``taus[0]``."""
    if variant == "triplet_ranked":
        return triplet_ranked(batch, margins)
    if taus is None:
        raise LossInputError(f"{variant} needs temperatures")
    if isinstance(taus, TemperatureSchedule):
        sched = taus
    else:
        taus = (taus,) if np.isscalar(taus) else tuple(taus)
        sched = None
    if variant in ("infonce", "log_out", "log_in"):
        tau = sched.taus[0] if sched is not None else taus[0]
        return {"infonce": infonce, "log_out": log_out, "log_in": log_in}[variant](batch, tau)
    if variant in RINCE_VARIANTS:
        return rince(batch, sched if sched is not None else TemperatureSchedule(taus), variant)
    raise LossInputError(f"unknown loss variant {variant!r}")


def finite_diff_grad(loss: Callable[[SimilarityBatch], float], batch: SimilarityBatch, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss`` with respect to every score, flat layout."""
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step {h} outside [1e-7, 1e-4]")
    s = batch.flat()
    g = np.empty_like(s)
    for k in range(s.size):
        up = s.copy()
        dn = s.copy()
        up[k] += h
        dn[k] -= h
        g[k] = (loss(batch.with_flat(up)) - loss(batch.with_flat(dn))) / (2.0 * h)
    return g


# ---------------------------------------------------------------------------
# Batched form used by the trainer: one row per query, one column per key.


def _masked_lse(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    xm = np.where(mask, x, -np.inf)
    m = xm.max(axis=1)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(xm - safe[:, None]).sum(axis=1))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _shared_softmax(x: np.ndarray, num: np.ndarray, rest: np.ndarray):
    """Row-wise log-sum-exp and softmax weights over ``num`` and ``rest`` with one exp pass.

    Both masks share the row maximum; rows where one side underflows to an
    empty sum are recomputed with their own shift.
    """
    m = x.max(axis=1)
    e = x - m[:, None]
    np.exp(e, out=e)
    out = []
    for mask in (num, rest):
        em = np.multiply(e, mask)
        tot = em.sum(axis=1)
        shift = m
        zero = tot == 0.0
        has = np.ones_like(zero)
        if zero.any():
            has = ~zero | mask.any(axis=1)
            bad = has & zero
            if bad.any():
                sub = _masked_lse(x[bad], mask[bad])
                em[bad] = np.exp(np.where(mask[bad], x[bad] - sub[:, None], -np.inf))
                tot[bad] = 1.0
                shift = m.copy()
                shift[bad] = sub
            tot[~has] = 1.0
        em /= tot[:, None]
        lse = shift + np.log(tot)
        lse[~has] = -np.inf
        out.append((lse, em))
    return out


def batched_loss(scores: np.ndarray, ranks: np.ndarray, variant: str, taus: Sequence[float]):
    """Per-query losses for a score table with integer rank codes.

    ``ranks[b, k]`` is the rank (1-based) of key ``k`` for query ``b``,
    ``NEG`` for negatives and 0 for keys to ignore. Returns
    ``(values (B,), grad (B, K), terms (B, r))`` matching ``rince`` row by row.
    Single-rank variants (infonce, log_in, log_out) read rank 1 and ``taus[0]``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ranks = np.asarray(ranks)
    B, _ = scores.shape
    if variant in ("infonce", "log_out"):
        forms, taus = ["out"], [taus[0]]
    elif variant == "log_in":
        forms, taus = ["in"], [taus[0]]
    elif variant in RINCE_VARIANTS:
        forms = [_rank_form(variant, i) for i in range(len(taus))]
    else:
        raise LossInputError(f"batched_loss does not handle {variant!r}")
    r = len(taus)
    grad = np.zeros_like(scores)
    terms = np.zeros((B, r))
    neg = ranks == NEG
    for i in range(r):
        tau = taus[i]
        num = ranks == i + 1
        rest = neg | (ranks > i + 1)
        x = scores / tau
        (lse_num, p_num), (lse_rest, p_rest) = _shared_softmax(x, num, rest)
        has_rest = np.isfinite(lse_rest)
        if forms[i] == "in":
            ok = np.isfinite(lse_num) & has_rest
            gap = np.where(ok, lse_rest - np.where(ok, lse_num, 0.0), -np.inf)
            terms[:, i] = np.where(ok, np.logaddexp(0.0, gap), 0.0)
            w = np.where(ok, _sigmoid(gap), 0.0)[:, None]
            grad += (w * (p_rest - p_num)) / tau
        else:
            lr = np.where(has_rest, lse_rest, 0.0)[:, None]
            gap = lr - x
            active = num & has_rest[:, None]
            terms[:, i] = np.where(active, np.logaddexp(0.0, np.where(active, gap, 0.0)), 0.0).sum(axis=1)
            w = np.where(active, _sigmoid(np.where(active, gap, 0.0)), 0.0)
            grad += (-w + p_rest * w.sum(axis=1, keepdims=True)) / tau
    return terms.sum(axis=1), grad, terms


def batched_triplet(scores: np.ndarray, ranks: np.ndarray, margins: Sequence[float]):
    """Row-wise ``triplet_ranked`` over a rank-coded score table."""
    B, K = scores.shape
    r = len(margins)
    values = np.zeros(B)
    terms = np.zeros((B, r))
    grad = np.zeros_like(scores)
    for b in range(B):
        row = ranks[b]
        pos_idx = [np.flatnonzero(row == i + 1) for i in range(r)]
        neg_idx = np.flatnonzero(row == NEG)
        d = sphere_distance(scores[b])
        v, gp, gn, t = triplet_from_distances([d[ix] for ix in pos_idx], d[neg_idx], margins)
        values[b] = v
        terms[b] = t
        for ix, g in zip(pos_idx, gp):
            grad[b, ix] += g / -d[ix]
        grad[b, neg_idx] += gn / -d[neg_idx]
    return values, grad, terms
