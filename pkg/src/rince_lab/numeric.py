"""Small, numerically careful primitives shared by every other module.

Everything works in float64. Vectors and matrices are plain numpy arrays;
the helpers validate shape and finiteness where a silent NaN would be costly.
"""
from __future__ import annotations

import hashlib
import math
from typing import Sequence

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.linalg import solve_triangular


class NumericError(ValueError):
    """Raised when an input violates a numeric precondition."""


def as_vec(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise NumericError(f"{name} must be a nonempty 1-d array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericError(f"{name} has non-finite entries")
    return v


def as_mat(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise NumericError(f"{name} must be a nonempty 2-d array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} has non-finite entries")
    return a


def cosine_similarity(a, b) -> float:
    a = as_vec(a, "a")
    b = as_vec(b, "b")
    if a.shape != b.shape:
        raise NumericError(f"length mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("degenerate embedding: zero norm")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def normalize_rows(x: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Scale each row to unit length. Zero rows raise unless ``eps`` > 0."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if eps == 0.0 and np.any(norms == 0.0):
        raise NumericError("degenerate embedding: zero norm")
    return x / np.maximum(norms, eps) if eps > 0.0 else x / norms


def cosine_matrix(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    ua = normalize_rows(a)
    ub = ua if b is None else normalize_rows(b)
    return np.clip(ua @ ub.T, -1.0, 1.0)


def log_sum_exp(xs: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    if x.size == 0:
        raise NumericError("log_sum_exp of an empty list")
    if not np.all(np.isfinite(x)):
        raise NumericError("log_sum_exp requires finite entries")
    m = x.max()
    return float(m + math.log(np.exp(x - m).sum()))


def cholesky(m, sym_tol: float = 1e-12) -> np.ndarray:
    """Lower-triangular factor ``L`` with ``L @ L.T == m``.

    Symmetry is checked relative to the largest entry; positive definiteness
    is left to LAPACK, whose failure is translated into a ``NumericError``.
    """
    a = as_mat(m, "covariance")
    if a.shape[0] != a.shape[1]:
        raise NumericError(f"cholesky needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > sym_tol * scale:
        raise NumericError("cholesky needs a symmetric matrix")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NumericError("covariance not positive definite") from exc


def regularize_covariance(cov: np.ndarray, rel: float = 1e-6) -> np.ndarray:
    """Add ``rel * trace/d`` to the diagonal; a zero trace falls back to ``rel``."""
    cov = np.asarray(cov, dtype=np.float64)
    d = cov.shape[0]
    eps = rel * float(np.trace(cov)) / d
    if eps <= 0.0:
        eps = rel
    return cov + eps * np.eye(d)


def mvn_log_density(x, mean, chol) -> float:
    x = as_vec(x, "x")
    mean = as_vec(mean, "mean")
    chol = as_mat(chol, "chol")
    d = x.size
    if mean.size != d or chol.shape != (d, d):
        raise NumericError(
            f"dimension mismatch: x {d}, mean {mean.size}, chol {chol.shape}"
        )
    z = solve_triangular(chol, x - mean, lower=True, check_finite=False)
    log_det = 2.0 * np.log(np.diag(chol)).sum()
    return float(-0.5 * (d * math.log(2.0 * math.pi) + log_det + z @ z))


def mvn_log_density_rows(xs: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Vectorized ``mvn_log_density`` over the rows of ``xs``."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    d = mean.size
    if xs.shape[1] != d or chol.shape != (d, d):
        raise NumericError("dimension mismatch")
    z = solve_triangular(chol, (xs - mean).T, lower=True, check_finite=False)
    log_det = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (d * math.log(2.0 * math.pi) + log_det + (z * z).sum(axis=0))


def _stream_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


class SeededRng:
    """Counter-based RNG (Philox) with independent named streams.

    ``stream("data")`` and ``stream("init")`` never share state, so adding a
    new consumer does not shift the draws of existing ones. Each stream is
    created once and then owned by the caller.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, Generator] = {}

    def stream(self, name: str) -> Generator:
        if name not in self._streams:
            ss = SeedSequence(self.seed, spawn_key=(_stream_key(name),))
            self._streams[name] = Generator(Philox(ss))
        return self._streams[name]

    def state(self) -> dict:
        return {name: g.bit_generator.state for name, g in sorted(self._streams.items())}

    def restore(self, state: dict) -> None:
        for name, st in state.items():
            self.stream(name).bit_generator.state = st


def make_rng(seed: int, name: str = "main") -> Generator:
    """Shortcut for a single named stream."""
    return SeededRng(seed).stream(name)
