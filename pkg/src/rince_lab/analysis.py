"""Closed-form gradient analysis of two-rank RINCE.

Relative penalties say which entries a single loss term pushes on hardest.
The trade-off function ``K`` compares the push that the rank-1 term puts on
a rank-2 positive against the pull that the rank-2 term puts on it; its zero
set in ``(h(q,p1), h(q,p2))`` is the equilibrium line.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .numeric import make_rng

PENALTY_KINDS = ("n_wrt_p2", "n_wrt_p1", "p2_wrt_p1")


@dataclass(frozen=True)
class PenaltyQuery:
    """Scores seen by one query in a two-rank setting."""

    p1: float
    p2: tuple[float, ...]
    negatives: tuple[float, ...]
    tau1: float
    tau2: float

    def __post_init__(self):
        p2 = (float(self.p2),) if np.isscalar(self.p2) else tuple(float(x) for x in self.p2)
        object.__setattr__(self, "p2", p2)
        object.__setattr__(self, "negatives", tuple(float(x) for x in self.negatives))
        vals = np.array([self.p1, *p2, *self.negatives])
        if np.any(np.abs(vals) > 1.0):
            raise ValueError("scores must lie in [-1, 1]")
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ValueError("temperatures must be positive")


def _lse(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return -np.inf if x.size == 0 else float(logsumexp(x))


def relative_penalty(query: PenaltyQuery, which: str, target: int = 0, literal: bool = False) -> float:
    """Gradient magnitude on ``target`` relative to the term's positive.

    ``n_wrt_p2``: negative ``target`` in the rank-2 term.
    ``n_wrt_p1``: negative ``target`` in the rank-1 term.
    ``p2_wrt_p1``: rank-2 positive ``target`` in the rank-1 term.

    With ``literal=True`` the target is left out of the denominator sum,
    which reproduces the textbook expressions for these ratios; the default
    keeps it in, which is what the gradient ratio actually equals.
    """
    if which not in PENALTY_KINDS:
        raise ValueError(f"unknown penalty {which!r}; expected one of {PENALTY_KINDS}")
    neg = np.asarray(query.negatives)
    p2 = np.asarray(query.p2)
    if which == "p2_wrt_p1":
        pool, others = p2, neg
    else:
        pool, others = neg, p2
    if not 0 <= target < pool.size:
        raise IndexError(f"target {target} out of range for {pool.size} entries")

    if which == "n_wrt_p2":
        t = query.tau2
        own = neg[target] / t
        if literal:
            den = _lse(np.delete(neg, target) / t)
            if not np.isfinite(den):
                raise ValueError("denominator sum is empty: need at least two negatives")
            return float(np.exp(own - den))
        # rank-2 term keeps all of P2 in its numerator
        return float(np.exp(own + _lse(p2 / t) - p2[0] / t - _lse(neg / t)))

    t = query.tau1
    own = pool[target] / t
    rest = np.delete(pool, target) if literal else pool
    den = _lse(np.concatenate([rest, others]) / t)
    if not np.isfinite(den):
        raise ValueError("denominator sum is empty")
    return float(np.exp(own - den))


def _weighted_lse(x: np.ndarray, log_w: np.ndarray | None) -> float:
    if x.size == 0:
        return -np.inf
    return float(logsumexp(x if log_w is None else x + log_w))


def tradeoff_k(h1: float, h2: float, negatives, tau1: float, tau2: float,
               extra_p2: Sequence[float] = (), neg_log_weights=None) -> float:
    """Signed sum of the rank-1 push and rank-2 pull on a rank-2 positive.

    ``extra_p2`` holds other rank-2 positives that share the rank-1
    denominator. ``neg_log_weights`` turns the negatives into a weighted
    quadrature (expectation mode); by default every negative has weight 1.
    """
    neg = np.asarray(negatives, dtype=np.float64)
    lw = None if neg_log_weights is None else np.asarray(neg_log_weights, dtype=np.float64)
    extra = np.asarray(extra_p2, dtype=np.float64)
    a = h2 / tau1
    den1 = np.logaddexp(
        _weighted_lse(neg / tau1, lw),
        _lse(np.concatenate([[h2, h1], extra]) / tau1),
    )
    push = np.exp(a - den1) / tau1
    lse_n2 = _weighted_lse(neg / tau2, lw)
    pull = np.exp(lse_n2 - np.logaddexp(lse_n2, h2 / tau2)) / tau2
    return float(push - pull)


def k_grid(tau1: float, tau2: float, h1s, h2s, negatives, neg_log_weights=None) -> np.ndarray:
    """``K`` on a grid; rows follow ``h1s``, columns follow ``h2s``."""
    neg = np.asarray(negatives, dtype=np.float64)
    lw = None if neg_log_weights is None else np.asarray(neg_log_weights, dtype=np.float64)
    h1 = np.asarray(h1s, dtype=np.float64)[:, None]
    h2 = np.asarray(h2s, dtype=np.float64)[None, :]
    den1 = np.logaddexp(_weighted_lse(neg / tau1, lw), np.logaddexp(h2 / tau1, h1 / tau1))
    push = np.exp(h2 / tau1 - den1) / tau1
    lse_n2 = _weighted_lse(neg / tau2, lw)
    pull = np.exp(lse_n2 - np.logaddexp(lse_n2, h2 / tau2)) / tau2
    return push - pull


@dataclass
class NegativeModel:
    mu: float = 0.1
    sigma: float = 0.1
    count: int = 64
    seed: int = 0
    mode: str = "sample"  # or "expectation"
    quad_points: int = 32

    def draw(self) -> tuple[np.ndarray, np.ndarray | None]:
        """Negative scores and optional log-weights."""
        if self.mode == "sample":
            x = make_rng(self.seed, "negatives").normal(self.mu, self.sigma, size=self.count)
            return np.clip(x, -1.0, 1.0), None
        if self.mode == "expectation":
            nodes, weights = np.polynomial.hermite_e.hermegauss(self.quad_points)
            x = self.mu + self.sigma * nodes
            w = weights / weights.sum() * self.count
            return x, np.log(w)
        raise ValueError(f"unknown negative model mode {self.mode!r}")


@dataclass
class EquilibriumCurve:
    h1: np.ndarray
    h2_root: np.ndarray  # NaN where K keeps one sign on [-1, 1]
    tau1: float
    tau2: float
    negatives: NegativeModel = field(default_factory=NegativeModel)

    def has_root(self) -> np.ndarray:
        return np.isfinite(self.h2_root)

    def slopes(self, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
        sel = (self.h1 >= lo) & (self.h1 <= hi) & self.has_root()
        h1, h2 = self.h1[sel], self.h2_root[sel]
        return np.diff(h2) / np.diff(h1)

    def is_non_decreasing(self, lo: float = -1.0, hi: float = 1.0, tol: float = 1e-9) -> bool:
        sel = (self.h1 >= lo) & (self.h1 <= hi) & self.has_root()
        return bool(np.all(np.diff(self.h2_root[sel]) >= -tol))


def solve_root(h1: float, negatives, tau1: float, tau2: float, neg_log_weights=None,
               tol: float = 1e-10, max_iter: int = 200) -> float:
    """Bisection for ``K(h1, .) = 0`` on [-1, 1]; NaN when there is no sign change."""
    k = lambda h2: tradeoff_k(h1, h2, negatives, tau1, tau2, neg_log_weights=neg_log_weights)
    lo, hi = -1.0, 1.0
    k_lo, k_hi = k(lo), k(hi)
    if k_lo == 0.0:
        return lo
    if k_hi == 0.0:
        return hi
    if k_lo > 0.0 or k_hi < 0.0:
        return float("nan")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if hi - lo <= tol:
            break
        if k(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def equilibrium_curve(tau1: float, tau2: float, h1_grid=None,
                      negatives: NegativeModel | None = None) -> EquilibriumCurve:
    model = negatives or NegativeModel()
    h1 = np.linspace(-1.0, 1.0, 201) if h1_grid is None else np.asarray(h1_grid, dtype=np.float64)
    if np.any(np.diff(h1) <= 0) or np.any(np.abs(h1) > 1.0):
        raise ValueError("h1 grid must be strictly increasing inside [-1, 1]")
    neg, lw = model.draw()
    roots = np.array([solve_root(x, neg, tau1, tau2, lw) for x in h1])
    return EquilibriumCurve(h1, roots, tau1, tau2, model)


def curve_flags(curve: EquilibriumCurve, lo: float = 0.5) -> dict:
    """Summary statistics written into curve file footers."""
    sel = (curve.h1 >= lo) & curve.has_root()
    h2 = curve.h2_root[sel]
    slopes = curve.slopes(lo, 1.0)
    return {
        "tau1": curve.tau1,
        "tau2": curve.tau2,
        "non_decreasing": curve.is_non_decreasing(),
        "below_diagonal_from_h1_0.5": bool(np.all(h2 < curve.h1[sel])) if h2.size else False,
        "max_slope_h1_0.5_to_1": float(np.max(slopes)) if slopes.size else float("nan"),
        "roots_found": int(curve.has_root().sum()),
    }


def write_curve_csv(curve: EquilibriumCurve, path: Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["h1", "h2_root"])
        for a, b in zip(curve.h1, curve.h2_root):
            w.writerow([repr(float(a)), "" if np.isnan(b) else repr(float(b))])
        for key, val in curve_flags(curve).items():
            fh.write(f"# {key}={val}\n")


def write_grid_csv(h1s, h2s, grid: np.ndarray, path: Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["h1", "h2", "K"])
        for i, a in enumerate(h1s):
            for j, b in enumerate(h2s):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(grid[i, j]))])
