"""Synthetic data: prototype Gaussians with low-rank tangent covariances,
the two-moons toy set, and view-pair generation by Gaussian perturbation.

A prototype dataset is a finite set of anchor points, each carrying a
low-rank covariance whose eigenvectors play the role of the local tangent
directions.  Views of a sample are independent draws from the same
prototype's Gaussian, so a view pair always shares its (hidden) label.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ssl_infolab.gaussians import Gaussian, semidefinite_cholesky


@dataclass(frozen=True)
class PrototypeDataset:
    """Anchor points with per-prototype covariance factors and class labels."""

    prototypes: np.ndarray        # (N, D)
    tangent_factors: np.ndarray   # (N, D, D) lower-triangular factors
    labels: np.ndarray            # (N,) int
    noise_scale: float = 1.0
    separation_floor: float = 0.0

    def __post_init__(self):
        protos = np.asarray(self.prototypes, dtype=np.float64)
        factors = np.asarray(self.tangent_factors, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        n, d = protos.shape
        if factors.shape != (n, d, d):
            raise ValueError(f"tangent_factors shape {factors.shape}, expected {(n, d, d)}")
        if labels.shape != (n,):
            raise ValueError("one label per prototype required")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        if n > 1:
            diffs = protos[:, np.newaxis, :] - protos[np.newaxis, :, :]
            dists = np.sqrt(np.sum(diffs ** 2, axis=2))
            np.fill_diagonal(dists, np.inf)
            if float(dists.min()) < self.separation_floor:
                raise ValueError(
                    f"prototype separation {dists.min():.3g} below floor {self.separation_floor}")
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "tangent_factors", factors)
        object.__setattr__(self, "labels", labels)
        for i in range(n):
            if nearest_prototype(self, protos[i]) != i:
                raise ValueError(f"prototype {i} is not its own nearest prototype")

    @property
    def n_prototypes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def component(self, i: int) -> Gaussian:
        """Prototype i's sampling Gaussian, with the global noise multiplier applied."""
        return Gaussian(self.prototypes[i], self.noise_scale * self.tangent_factors[i])


def nearest_prototype(ds: PrototypeDataset, x: np.ndarray) -> int:
    """Index minimizing (x - p_n)^T Sigma_n (x - p_n); ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    diffs = ds.prototypes - x
    covs = np.einsum("nij,nkj->nik", ds.tangent_factors, ds.tangent_factors)
    forms = np.einsum("ni,nij,nj->n", diffs, covs, diffs)
    return int(np.argmin(forms))


def sample_pairs(ds: PrototypeDataset, n_pairs: int, seed: int
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """n view pairs: a uniformly chosen prototype per pair, two independent
    draws from its Gaussian.  Returns (x, x_prime, labels)."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, ds.n_prototypes, size=n_pairs)
    eps = rng.standard_normal((2, n_pairs, ds.dim))
    factors = ds.noise_scale * ds.tangent_factors[idx]
    base = ds.prototypes[idx]
    x = base + np.einsum("nij,nj->ni", factors, eps[0])
    xp = base + np.einsum("nij,nj->ni", factors, eps[1])
    return x, xp, ds.labels[idx]


def random_prototype_dataset(n_prototypes: int, dim: int, seed: int, rank: Optional[int] = None,
                             n_classes: int = 2, separation_floor: float = 1.0,
                             noise_scale: float = 0.05, spread: float = 4.0,
                             max_tries: int = 10000) -> PrototypeDataset:
    """Seeded prototypes kept at least ``separation_floor`` apart, each with a
    rank-``rank`` tangent covariance U diag(s) U^T from a random orthonormal U."""
    rng = np.random.default_rng(seed)
    rank = dim if rank is None else rank
    protos = []
    tries = 0
    while len(protos) < n_prototypes:
        cand = spread * rng.standard_normal(dim)
        if all(np.linalg.norm(cand - p) >= separation_floor for p in protos):
            protos.append(cand)
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not place prototypes above the separation floor")
    protos = np.stack(protos)
    factors = np.zeros((n_prototypes, dim, dim))
    for i in range(n_prototypes):
        q, _ = np.linalg.qr(rng.standard_normal((dim, rank)))
        scales = rng.uniform(0.5, 1.5, size=rank)
        cov = (q * scales) @ q.T
        factors[i] = semidefinite_cholesky(cov)
    labels = rng.integers(0, n_classes, size=n_prototypes)
    labels[:n_classes] = np.arange(n_classes)  # every class occupied
    return PrototypeDataset(protos, factors, labels, noise_scale, separation_floor)


def two_moons(n: int, noise: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two interleaved radius-1 half circles plus isotropic Gaussian jitter.

    Class 0 follows (cos t, sin t) for t in [0, pi]; class 1 is the point
    reflection of that arc landing at (1 - cos t, 0.5 - sin t).
    """
    if n % 2 != 0:
        raise ValueError("n must be even")
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    points = np.concatenate([upper, lower], axis=0)
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    if noise > 0.0:
        points = points + noise * np.random.default_rng(seed).standard_normal(points.shape)
    return points, labels


def gaussian_view_pairs(points: np.ndarray, view_noise: float, seed: int
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Two independently perturbed views x = p + eps, x' = p + eps' per point."""
    points = np.asarray(points, dtype=np.float64)
    eps = np.random.default_rng(seed).standard_normal((2,) + points.shape)
    return points + view_noise * eps[0], points + view_noise * eps[1]


# ---------------------------------------------------------------------------
# CSV interchange: header row, one sample per line, label in the last column.
# ---------------------------------------------------------------------------

def save_points_csv(path, points: np.ndarray, labels: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(points.shape[1])] + ["label"])
        for row, lab in zip(points, labels):
            writer.writerow([repr(float(v)) for v in row] + [int(lab)])


def load_points_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError("points CSV must end with a 'label' column")
        rows = list(reader)
    points = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
    labels = np.array([int(float(r[-1])) for r in rows], dtype=np.int64)
    return points, labels


def save_pairs_csv(path, x: np.ndarray, x_prime: np.ndarray, labels: np.ndarray) -> None:
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_prime, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(x.shape[1])]
                        + [f"xp{j}" for j in range(xp.shape[1])] + ["label"])
        for a, b, lab in zip(x, xp, labels):
            writer.writerow([repr(float(v)) for v in a] + [repr(float(v)) for v in b]
                            + [int(lab)])


def read_csv(path) -> tuple[list, list]:
    """Generic reader for the repo's own CSV outputs: (header, rows of str)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    if not header:
        raise ValueError("CSV is missing its header row")
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError(f"row {i} has {len(row)} cells, header has {len(header)}")
    return header, rows


def load_pairs_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError("pairs CSV must end with a 'label' column")
        d = (len(header) - 1) // 2
        rows = list(reader)
    x = np.array([[float(v) for v in r[:d]] for r in rows], dtype=np.float64)
    xp = np.array([[float(v) for v in r[d:2 * d]] for r in rows], dtype=np.float64)
    labels = np.array([int(float(r[-1])) for r in rows], dtype=np.int64)
    return x, xp, labels
