"""Synthetic datasets with known similarity ranks.

Two generators: a two-level class/superclass hierarchy of Gaussian clusters,
and smooth random-walk trajectories from which clips at three temporal
distances (same clip, nearby clip, far clip) are cut. Plus the rank
assignment rules that turn labels or class-center similarities into
positive sets.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numeric import cosine_matrix


class SpecError(ValueError):
    """A dataset spec field is out of range; ``field`` names it."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


@dataclass(frozen=True)
class HierarchySpec:
    num_superclasses: int = 5
    classes_per_superclass: int = 4
    samples_per_class: int = 100
    dim: int = 16
    sigma_super: float = 1.0
    sigma_class: float = 0.1
    sigma_x: float = 0.08

    def __post_init__(self):
        for name in ("num_superclasses", "classes_per_superclass", "samples_per_class", "dim"):
            if int(getattr(self, name)) < 1:
                raise SpecError(name, "must be a positive integer")
        if self.dim < 2:
            raise SpecError("dim", "must be at least 2")
        if not self.sigma_x >= 0:
            raise SpecError("sigma_x", "must be non-negative")
        if not self.sigma_class > self.sigma_x:
            raise SpecError("sigma_class", "must exceed sigma_x")
        if not self.sigma_super > self.sigma_class:
            raise SpecError("sigma_super", "must exceed sigma_class")

    @property
    def num_classes(self) -> int:
        return self.num_superclasses * self.classes_per_superclass


@dataclass
class HierarchyDataset:
    x: np.ndarray
    classes: np.ndarray
    superclasses: np.ndarray
    spec: HierarchySpec
    class_centers: np.ndarray | None = None

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx) -> "HierarchyDataset":
        idx = np.asarray(idx)
        return HierarchyDataset(self.x[idx], self.classes[idx], self.superclasses[idx], self.spec, self.class_centers)

    def split(self, test_fraction: float = 0.2):
        """Deterministic per-class split: the last ``test_fraction`` of each class goes to test."""
        train, test = [], []
        for c in np.unique(self.classes):
            idx = np.flatnonzero(self.classes == c)
            n_test = int(round(test_fraction * idx.size))
            train.extend(idx[: idx.size - n_test])
            test.extend(idx[idx.size - n_test:])
        return self.subset(np.sort(train)), self.subset(np.sort(test))

    def without_superclasses(self, held_out) -> tuple["HierarchyDataset", "HierarchyDataset"]:
        held = np.isin(self.superclasses, np.atleast_1d(held_out))
        return self.subset(np.flatnonzero(~held)), self.subset(np.flatnonzero(held))


def gen_hierarchy(spec: HierarchySpec, rng: np.random.Generator) -> HierarchyDataset:
    S, C, n, d = spec.num_superclasses, spec.classes_per_superclass, spec.samples_per_class, spec.dim
    directions = rng.normal(size=(S, d))
    super_centers = spec.sigma_super * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    class_centers = np.repeat(super_centers, C, axis=0) + spec.sigma_class * rng.normal(size=(S * C, d))
    classes = np.repeat(np.arange(S * C), n)
    x = class_centers[classes] + spec.sigma_x * rng.normal(size=(S * C * n, d))
    return HierarchyDataset(x, classes, classes // C, spec, class_centers)


def within_between_cosines(x: np.ndarray, classes: np.ndarray, superclasses: np.ndarray) -> tuple[float, float, float]:
    """Mean cosine over distinct pairs: same class, same superclass only, different superclass."""
    sim = cosine_matrix(x)
    same_c = classes[:, None] == classes[None, :]
    same_s = superclasses[:, None] == superclasses[None, :]
    off = ~np.eye(len(x), dtype=bool)
    within = sim[same_c & off].mean()
    sup = sim[same_s & ~same_c].mean() if np.any(same_s & ~same_c) else float("nan")
    cross = sim[~same_s].mean() if np.any(~same_s) else float("nan")
    return float(within), float(sup), float(cross)


# -- temporal sequences ---------------------------------------------------------


@dataclass(frozen=True)
class SequenceSpec:
    num_trajectories: int = 40
    length: int = 96
    latent_dim: int = 4
    drift: float = 0.15
    window: int = 4
    min_gap: int = 24
    dim: int = 16
    identity_scale: float = 1.0
    noise: float = 0.1

    def __post_init__(self):
        for name in ("num_trajectories", "length", "latent_dim", "window", "dim"):
            if int(getattr(self, name)) < 1:
                raise SpecError(name, "must be a positive integer")
        if self.drift < 0:
            raise SpecError("drift", "must be non-negative")
        if not self.min_gap > self.window:
            raise SpecError("min_gap", "must exceed window")
        if self.window + self.min_gap + self.window > self.length:
            raise SpecError("length", "too short for a near window and a far window at min_gap")


@dataclass
class SequenceDataset:
    frames: np.ndarray  # (num_trajectories, length, dim)
    spec: SequenceSpec

    def clip(self, traj: int, start: int) -> np.ndarray:
        w = self.spec.window
        if start < 0 or start + w > self.spec.length:
            raise IndexError(f"window [{start}, {start + w}) outside trajectory of length {self.spec.length}")
        return self.frames[traj, start:start + w].mean(axis=0)

    def clips(self, trajs, starts) -> np.ndarray:
        w = self.spec.window
        idx = np.asarray(starts)[:, None] + np.arange(w)[None, :]
        return self.frames[np.asarray(trajs)[:, None], idx].mean(axis=1)

    def sample_triplet_starts(self, rng: np.random.Generator, n: int):
        """Query, near and far window starts for ``n`` random clips.

        The near window starts within one window length of the query; the
        far one at least ``min_gap`` frames away from both.
        """
        s = self.spec
        w, g, T = s.window, s.min_gap, s.length
        trajs = rng.integers(0, s.num_trajectories, size=n)
        q = np.empty(n, dtype=int)
        near = np.empty(n, dtype=int)
        far = np.empty(n, dtype=int)
        for i in range(n):
            while True:
                qi = int(rng.integers(0, T - w + 1))
                lo, hi = max(0, qi - w), min(T - w, qi + w)
                ni = int(rng.integers(lo, hi + 1))
                a, b = min(qi, ni), max(qi, ni)
                # far window must sit >= g frames before a or after b
                cands = [*range(0, a - g - w + 1), *range(b + w + g, T - w + 1)]
                if cands:
                    break
            q[i], near[i] = qi, ni
            far[i] = cands[int(rng.integers(0, len(cands)))]
        return trajs, q, near, far

    def eval_clips(self, per_trajectory: int = 8):
        """Evenly spaced clips with their trajectory ids, for retrieval."""
        s = self.spec
        starts = np.linspace(0, s.length - s.window, per_trajectory).round().astype(int)
        trajs = np.repeat(np.arange(s.num_trajectories), per_trajectory)
        st = np.tile(starts, s.num_trajectories)
        return self.clips(trajs, st), trajs


def gen_sequences(spec: SequenceSpec, rng: np.random.Generator) -> SequenceDataset:
    """Smooth latent random walks mapped into observation space.

    Each trajectory gets its own identity offset; the latent state carries a
    velocity with 0.9 persistence so successive frames change gradually.
    """
    K, T, L, d = spec.num_trajectories, spec.length, spec.latent_dim, spec.dim
    A = rng.normal(size=(d, L)) / math.sqrt(L)
    identity = spec.identity_scale * rng.normal(size=(K, d))
    vel = np.zeros((K, L))
    z = np.zeros((K, L))
    frames = np.empty((K, T, d))
    for t in range(T):
        vel = 0.9 * vel + spec.drift * rng.normal(size=(K, L))
        z = z + vel
        frames[:, t] = identity + z @ A.T + spec.noise * rng.normal(size=(K, d))
    return SequenceDataset(frames, spec)


# -- augmentation -----------------------------------------------------------------


def augment(x: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Noise, a small rotation in a random 2-plane and a random rescale.

    ``strength`` sets the noise norm relative to ``|x|``, the maximum rotation
    angle as a fraction of pi/2, and the scale range ``[1-s, 1+s]``.
    """
    if strength < 0:
        raise ValueError("strength must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if strength == 0:
        return x.copy()
    return augment_rows(x[None, :], strength, rng)[0]


def augment_rows(x: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Row-wise ``augment`` with independent draws per row."""
    x = np.asarray(x, dtype=np.float64)
    if strength == 0:
        return x.copy()
    n, d = x.shape
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    # random 2-plane from two orthonormalized gaussian vectors
    u = rng.normal(size=(n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = rng.normal(size=(n, d))
    v -= (v * u).sum(axis=1, keepdims=True) * u
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    theta = rng.uniform(-1.0, 1.0, size=(n, 1)) * strength * math.pi / 2
    a = (x * u).sum(axis=1, keepdims=True)
    b = (x * v).sum(axis=1, keepdims=True)
    c, s = np.cos(theta), np.sin(theta)
    rotated = x + (a * (c - 1) - b * s) * u + (a * s + b * (c - 1)) * v
    noise = rng.normal(size=(n, d)) * (strength * norms / math.sqrt(d))
    scale = rng.uniform(1.0 - strength, 1.0 + strength, size=(n, 1))
    return scale * (rotated + noise)


# -- rank assignment ----------------------------------------------------------------


@dataclass
class RankAssignment:
    positives_by_rank: list[np.ndarray]
    negatives: np.ndarray


def assign_ranks_exact(classes: np.ndarray, superclasses: np.ndarray, query: int) -> RankAssignment:
    """Rank 1: same class. Rank 2: same superclass, other class. Rest: negatives."""
    classes = np.asarray(classes)
    superclasses = np.asarray(superclasses)
    idx = np.arange(classes.size)
    others = idx != query
    same_c = classes == classes[query]
    same_s = superclasses == superclasses[query]
    return RankAssignment(
        [idx[others & same_c], idx[others & same_s & ~same_c]],
        idx[others & ~same_s],
    )


def class_center_similarity(centers: np.ndarray, sigma_noise: float = 0.0, rng=None) -> np.ndarray:
    """Pairwise center cosines, optionally perturbed by symmetric Gaussian noise."""
    sim = cosine_matrix(centers)
    if sigma_noise > 0:
        if rng is None:
            raise ValueError("noisy similarities need an rng")
        noise = rng.normal(0.0, sigma_noise, size=sim.shape)
        noise = np.triu(noise, 1)
        sim = sim + noise + noise.T
    return sim


def assign_ranks_noisy(class_centers: np.ndarray, threshold: float, sigma_noise: float = 0.0,
                       rng=None, similarity: np.ndarray | None = None) -> list[set[int]]:
    """Rank-2 class sets from thresholded class-center similarity.

    Class ``j`` is rank 2 for class ``i`` when their (possibly noisy)
    similarity exceeds ``threshold``. Pass a precomputed ``similarity`` to
    reuse one noise draw across thresholds.
    """
    if not -1.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (-1, 1)")
    sim = similarity if similarity is not None else class_center_similarity(class_centers, sigma_noise, rng)
    n = sim.shape[0]
    return [set(int(j) for j in np.flatnonzero(sim[i] > threshold) if j != i) for i in range(n)]


def superclass_rank2_sets(num_superclasses: int, classes_per_superclass: int) -> list[set[int]]:
    C = classes_per_superclass
    return [set(range((c // C) * C, (c // C + 1) * C)) - {c} for c in range(num_superclasses * C)]


def similarity_gap_midpoint(class_centers: np.ndarray, classes_per_superclass: int) -> float:
    """Threshold halfway between the lowest within-superclass and highest cross-superclass center cosine."""
    sim = cosine_matrix(class_centers)
    n = sim.shape[0]
    sup = np.arange(n) // classes_per_superclass
    same = (sup[:, None] == sup[None, :]) & ~np.eye(n, dtype=bool)
    cross = sup[:, None] != sup[None, :]
    lo = sim[same].min() if np.any(same) else 1.0
    hi = sim[cross].max() if np.any(cross) else -1.0
    return float(0.5 * (lo + hi))


def rank2_matrix(rank2_sets: list[set[int]]) -> np.ndarray:
    """Boolean class-by-class table for fast lookups during training."""
    n = len(rank2_sets)
    m = np.zeros((n, n), dtype=bool)
    for i, s in enumerate(rank2_sets):
        m[i, list(s)] = True
    return m


# -- CSV interchange ------------------------------------------------------------------


def dump_csv(ds: HierarchyDataset, path) -> None:
    d = ds.x.shape[1]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(d)] + ["class", "superclass"])
        for row, c, s in zip(ds.x, ds.classes, ds.superclasses):
            w.writerow([repr(float(v)) for v in row] + [int(c), int(s)])


def load_csv(path, spec: HierarchySpec | None = None) -> HierarchyDataset:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-2:] != ["class", "superclass"]:
        raise ValueError(f"{path}: expected trailing class,superclass columns")
    arr = np.array([[float(v) for v in r[:-2]] for r in body], dtype=np.float64)
    classes = np.array([int(r[-2]) for r in body])
    supers = np.array([int(r[-1]) for r in body])
    if spec is None:
        n_super = int(supers.max()) + 1
        spec = HierarchySpec(
            num_superclasses=n_super,
            classes_per_superclass=(int(classes.max()) + 1) // n_super,
            samples_per_class=int(np.bincount(classes).max()),
            dim=arr.shape[1],
        )
    centers = np.stack([arr[classes == c].mean(axis=0) for c in range(int(classes.max()) + 1)])
    return HierarchyDataset(arr.reshape(len(body), -1), classes, supers, spec, centers)


def spec_dict(spec) -> dict:
    return asdict(spec)
