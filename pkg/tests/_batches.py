"""Random ranked batches shared by the loss tests and the acceptance suite."""
import numpy as np

from rince_lab.losses import SimilarityBatch, sphere_distance


def random_batch(rng, r=None, per_rank=None, n_neg=None, lo=-0.99, hi=0.99):
    r = int(rng.integers(1, 4)) if r is None else r
    ranks = []
    for _ in range(r):
        k = int(rng.integers(1, 4)) if per_rank is None else per_rank
        ranks.append(tuple(rng.uniform(lo, hi, size=k)))
    n = int(rng.integers(1, 65)) if n_neg is None else n_neg
    return SimilarityBatch(tuple(ranks), tuple(rng.uniform(lo, hi, size=n)))


def random_taus(rng, r):
    tau1 = rng.uniform(0.07, 0.2)
    steps = rng.uniform(0.02, 0.3, size=r - 1)
    return tuple(np.concatenate([[tau1], tau1 + np.cumsum(steps)]))


def near_hinge_corner(batch, margins, tol=1e-3):
    """True when some triplet hinge argument sits within ``tol`` of zero."""
    pos = [sphere_distance(p) for p in batch.positives_by_rank]
    neg = sphere_distance(batch.negatives)
    for i, dp in enumerate(pos):
        later = np.concatenate([*pos[i + 1:], neg])
        h = dp[:, None] - later[None, :] + margins[i]
        if np.any(np.abs(h) < tol):
            return True
    return False


def grad_close(analytic, numeric, rel=1e-6, floor=1e-9):
    err = np.abs(analytic - numeric)
    return bool(np.all(err <= np.maximum(rel * np.abs(numeric), floor))), float(
        np.max(err / np.maximum(np.abs(numeric), floor / rel))
    )


def fd_grad_table(value_fn, flat, codes, h=1e-4):
    """Richardson-extrapolated central differences, all perturbations in one table.

    ``value_fn(scores, codes)`` maps a (rows, K) score table to per-row losses.
    """
    n = flat.size
    eye = np.eye(n)
    steps = (h, h / 2)
    rows = np.concatenate([flat + s * sign * eye for s in steps for sign in (1.0, -1.0)])
    vals = value_fn(rows, np.broadcast_to(codes, rows.shape)).reshape(4, n)
    d_h = (vals[0] - vals[1]) / (2 * h)
    d_h2 = (vals[2] - vals[3]) / h
    return (4 * d_h2 - d_h) / 3


def rank_codes_of(batch, neg_code=-1):
    codes = [k + 1 for k, p in enumerate(batch.positives_by_rank) for _ in p]
    return np.array(codes + [neg_code] * len(batch.negatives))
