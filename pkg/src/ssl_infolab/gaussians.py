"""Exact Gaussian and Gaussian-mixture primitives.

Covariances are stored through a lower-triangular factor L with
Sigma = L @ L.T, so densities and determinants never form an explicit
inverse.  Rank-deficient covariances are stored exactly; any operation that
needs a log-determinant or inverse either receives a jitter (lambda * I added
to Sigma) or raises :class:`RankDeficientCovarianceError`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

DEFAULT_JITTER = 1e-6

_LOG_2PI = float(np.log(2.0 * np.pi))


class RankDeficientCovarianceError(ValueError):
    """Covariance is singular and no jitter was supplied."""


class DimensionMismatchError(ValueError):
    """Operands live in different dimensions."""


def semidefinite_cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower-triangular L with non-negative diagonal and L @ L.T == cov.

    Works for positive *semi*-definite matrices: eigendecompose, truncate
    eigenvalues below 1e-12 of the largest to exactly zero, then LQ-factor the
    rank-r square root so null directions carry exact zero columns.  Plain
    Cholesky is used on the fast path when the matrix is comfortably positive
    definite.
    """
    cov = np.asarray(cov, dtype=np.float64)
    cov = 0.5 * (cov + cov.T)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    scale = max(float(np.max(np.abs(evals))), 0.0)
    if scale == 0.0:
        return np.zeros((d, d))
    if float(np.min(evals)) < -1e-10 * scale:
        raise ValueError("matrix is not positive semi-definite")
    keep = evals > 1e-12 * scale
    root = evecs[:, keep] * np.sqrt(evals[keep])
    # root @ root.T == cov (within truncation); QR of root.T makes root.T = QR
    # with R upper-trapezoidal, so R.T padded with zero columns is the
    # lower-triangular factor.  Row signs of R fix the diagonal non-negative.
    _, r = np.linalg.qr(root.T)
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    low = np.zeros((d, d))
    low[:, : r.shape[0]] = r.T * signs[np.newaxis, :]
    return low


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal stored as mean and lower-triangular covariance factor."""

    mean: np.ndarray
    cov_factor: np.ndarray
    rank_hint: Optional[int] = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        factor = np.asarray(self.cov_factor, dtype=np.float64)
        if factor.ndim != 2 or factor.shape[0] != factor.shape[1] or factor.shape[0] != mean.shape[0]:
            raise DimensionMismatchError(
                f"cov_factor shape {factor.shape} incompatible with mean of dim {mean.shape[0]}")
        if not np.allclose(factor, np.tril(factor)):
            raise ValueError("cov_factor must be lower-triangular")
        if np.any(np.diag(factor) < 0.0):
            raise ValueError("cov_factor diagonal must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov_factor", factor)
        object.__setattr__(self, "rank_hint",
                           self.rank_hint if self.rank_hint is not None
                           else int(np.sum(np.diag(factor) > 0.0)))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def cov(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T

    def is_full_rank(self) -> bool:
        d = np.diag(self.cov_factor)
        if np.any(d == 0.0):
            return False
        return np.min(d) > 1e-7 * max(np.max(d), 1e-300)

    def jittered(self, jitter: float = DEFAULT_JITTER) -> "Gaussian":
        """Gaussian with covariance Sigma + jitter * I (fresh factor)."""
        if jitter <= 0.0:
            raise ValueError("jitter must be positive")
        cov = self.cov + jitter * np.eye(self.dim)
        return Gaussian(self.mean, np.linalg.cholesky(cov), rank_hint=self.dim)

    @classmethod
    def from_cov(cls, mean, cov, rank_hint: Optional[int] = None) -> "Gaussian":
        return cls(np.asarray(mean, dtype=np.float64), semidefinite_cholesky(cov), rank_hint)

    @classmethod
    def standard(cls, dim: int) -> "Gaussian":
        return cls(np.zeros(dim), np.eye(dim))


@dataclass(frozen=True)
class GaussianMixture:
    """Finite mixture of Gaussians with normalized non-negative weights."""

    components: tuple
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("mixture needs at least one component")
        dim = comps[0].dim
        if any(c.dim != dim for c in comps):
            raise DimensionMismatchError("components have differing dimensions")
        w = (np.full(len(comps), 1.0 / len(comps))
             if self.weights is None else np.asarray(self.weights, dtype=np.float64))
        if w.shape != (len(comps),):
            raise ValueError("one weight per component required")
        if np.any(w < 0.0):
            raise ValueError("weights must be non-negative")
        if abs(float(np.sum(w)) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)

    def jittered(self, jitter: float = DEFAULT_JITTER) -> "GaussianMixture":
        return GaussianMixture(tuple(c.jittered(jitter) for c in self.components), self.weights)

    def to_json(self) -> str:
        doc = {
            "weights": self.weights.tolist(),
            "components": [
                {"mean": c.mean.tolist(), "cov": c.cov.tolist()} for c in self.components
            ],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixture":
        doc = json.loads(text)
        comps = tuple(Gaussian.from_cov(c["mean"], c["cov"]) for c in doc["components"])
        return cls(comps, np.asarray(doc["weights"], dtype=np.float64))


def _require_full_rank(g: Gaussian, jitter: Optional[float]) -> Gaussian:
    if g.is_full_rank():
        return g
    if jitter is None:
        raise RankDeficientCovarianceError(
            "rank-deficient covariance: supply a jitter before log-det/inverse operations")
    return g.jittered(jitter)


def log_density(g: Gaussian, x: np.ndarray, jitter: Optional[float] = None) -> float:
    """log N(x; mu, Sigma) through the Cholesky factor (no explicit inverse)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (g.dim,):
        raise DimensionMismatchError(f"x has shape {x.shape}, expected ({g.dim},)")
    g = _require_full_rank(g, jitter)
    half = sla.solve_triangular(g.cov_factor, x - g.mean, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(g.cov_factor))))
    return -0.5 * (g.dim * _LOG_2PI + logdet + float(half @ half))


def log_density_batch(g: Gaussian, xs: np.ndarray, jitter: Optional[float] = None) -> np.ndarray:
    """Row-wise log-density of an (n, d) sample matrix."""
    xs = np.asarray(xs, dtype=np.float64)
    g = _require_full_rank(g, jitter)
    half = sla.solve_triangular(g.cov_factor, (xs - g.mean).T, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(g.cov_factor))))
    return -0.5 * (g.dim * _LOG_2PI + logdet + np.sum(half * half, axis=0))


def mixture_log_density_batch(m: GaussianMixture, xs: np.ndarray,
                              jitter: Optional[float] = None) -> np.ndarray:
    logs = np.stack([log_density_batch(c, xs, jitter) for c in m.components])
    with np.errstate(divide="ignore"):
        logw = np.log(m.weights)[:, np.newaxis]
    a = logs + logw
    top = np.max(a, axis=0)
    return top + np.log(np.sum(np.exp(a - top), axis=0))


def sample(g: Gaussian, n: int, seed: int) -> np.ndarray:
    """n i.i.d. draws mu + L @ eps; deterministic given the 64-bit seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, g.dim))
    return g.mean + eps @ g.cov_factor.T


def sample_mixture(m: GaussianMixture, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    root = np.random.SeedSequence(seed)
    cat_rng = np.random.default_rng(root.spawn(1)[0])
    counts = cat_rng.multinomial(n, m.weights)
    comp_seeds = root.spawn(m.n_components)
    rows = []
    for comp, cnt, s in zip(m.components, counts, comp_seeds):
        if cnt == 0:
            continue
        eps = np.random.default_rng(s).standard_normal((cnt, comp.dim))
        rows.append(comp.mean + eps @ comp.cov_factor.T)
    xs = np.concatenate(rows, axis=0)
    perm = np.random.default_rng(root.spawn(1)[0]).permutation(n)
    return xs[perm]


def mixture_moments(m: GaussianMixture) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and covariance of the mixture."""
    mean = np.einsum("i,ij->j", m.weights, np.stack([c.mean for c in m.components]))
    cov = np.zeros((m.dim, m.dim))
    for w, c in zip(m.weights, m.components):
        cov += w * (c.cov + np.outer(c.mean, c.mean))
    cov -= np.outer(mean, mean)
    return mean, 0.5 * (cov + cov.T)


def kl_divergence(p: Gaussian, q: Gaussian, jitter: Optional[float] = DEFAULT_JITTER) -> float:
    """Closed-form KL(p || q) for full-rank (after jitter) Gaussians."""
    if p.dim != q.dim:
        raise DimensionMismatchError("KL requires equal dimensions")
    p = _require_full_rank(p, jitter)
    q = _require_full_rank(q, jitter)
    d = p.dim
    # tr(Sigma_q^{-1} Sigma_p) = ||Lq^{-1} Lp||_F^2
    m = sla.solve_triangular(q.cov_factor, p.cov_factor, lower=True)
    trace_term = float(np.sum(m * m))
    half = sla.solve_triangular(q.cov_factor, q.mean - p.mean, lower=True)
    quad = float(half @ half)
    logdet_p = 2.0 * float(np.sum(np.log(np.diag(p.cov_factor))))
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(q.cov_factor))))
    return 0.5 * (trace_term + quad - d + logdet_q - logdet_p)


def bhattacharyya_distance(p: Gaussian, q: Gaussian,
                           jitter: Optional[float] = DEFAULT_JITTER) -> float:
    """Bhattacharyya distance (Chernoff divergence at alpha = 1/2)."""
    if p.dim != q.dim:
        raise DimensionMismatchError("Bhattacharyya requires equal dimensions")
    p = _require_full_rank(p, jitter)
    q = _require_full_rank(q, jitter)
    mid = 0.5 * (p.cov + q.cov)
    chol_mid = np.linalg.cholesky(mid)
    half = sla.solve_triangular(chol_mid, p.mean - q.mean, lower=True)
    quad = float(half @ half) / 8.0
    logdet_mid = 2.0 * float(np.sum(np.log(np.diag(chol_mid))))
    logdet_p = 2.0 * float(np.sum(np.log(np.diag(p.cov_factor))))
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(q.cov_factor))))
    return quad + 0.5 * (logdet_mid - 0.5 * (logdet_p + logdet_q))


def random_gaussian(dim: int, seed: int, rank: Optional[int] = None,
                    mean_scale: float = 1.0, cov_scale: float = 1.0) -> Gaussian:
    """Seeded random Gaussian; rank < dim gives a degenerate covariance."""
    rng = np.random.default_rng(seed)
    mean = mean_scale * rng.standard_normal(dim)
    r = dim if rank is None else rank
    a = rng.standard_normal((dim, r))
    cov = cov_scale ** 2 * (a @ a.T) / r
    return Gaussian.from_cov(mean, cov, rank_hint=r)


def random_mixture(dim: int, n_components: int, seed: int,
                   mean_scale: float = 3.0, cov_scale: float = 1.0) -> GaussianMixture:
    """Seeded random full-rank mixture with Dirichlet weights."""
    root = np.random.SeedSequence(seed)
    comp_seeds = root.spawn(n_components + 1)
    comps = tuple(
        random_gaussian(dim, int(s.generate_state(1)[0]), mean_scale=mean_scale,
                        cov_scale=cov_scale)
        for s in comp_seeds[:-1]
    )
    wrng = np.random.default_rng(comp_seeds[-1])
    w = wrng.dirichlet(np.full(n_components, 2.0))
    w = w / np.sum(w)
    return GaussianMixture(comps, w)
