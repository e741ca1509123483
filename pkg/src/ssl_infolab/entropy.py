"""Mixture-entropy estimators: Monte-Carlo oracle, moment upper bound,
pairwise-distance lower/upper bounds, and the log-determinant batch estimator.

All values are differential entropies in nats.  The Monte-Carlo estimate is
the reference every bound is tested against.  The pairwise bounds and the
batch estimators are differentiable: their graphs are recorded on a
:class:`~ssl_infolab.autodiff.Tape` so gradients with respect to component
means (or batch embeddings) come from the same code path as the values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ssl_infolab import autodiff as ad
from ssl_infolab.autodiff import Tape, Var
from ssl_infolab.gaussians import (
    DEFAULT_JITTER,
    Gaussian,
    GaussianMixture,
    _require_full_rank,
    mixture_log_density_batch,
    mixture_moments,
    sample_mixture,
)

_LOG_2PI_E = float(np.log(2.0 * np.pi * np.e))


class EstimatorKind(enum.Enum):
    MONTE_CARLO = "MonteCarlo"
    MOMENT_UPPER = "MomentUpper"
    PAIRWISE_LOWER = "PairwiseLower"
    PAIRWISE_UPPER = "PairwiseUpper"
    LOG_DET = "LogDet"
    CLOSED_FORM_GAUSSIAN = "ClosedFormGaussian"


@dataclass(frozen=True)
class EntropyEstimate:
    """One entropy figure plus provenance; std_error only for Monte Carlo."""

    value: float
    kind: EstimatorKind
    std_error: Optional[float] = None
    n_samples: Optional[int] = None

    def __post_init__(self):
        if (self.std_error is not None) != (self.kind is EstimatorKind.MONTE_CARLO):
            raise ValueError("std_error must be present exactly for Monte-Carlo estimates")


def gaussian_entropy(g: Gaussian, jitter: Optional[float] = DEFAULT_JITTER) -> EntropyEstimate:
    """Exact differential entropy (1/2) log det(2 pi e Sigma)."""
    g = _require_full_rank(g, jitter)
    logdet = 2.0 * float(np.sum(np.log(np.diag(g.cov_factor))))
    return EntropyEstimate(0.5 * (g.dim * _LOG_2PI_E + logdet),
                           EstimatorKind.CLOSED_FORM_GAUSSIAN)


def mc_entropy(m: GaussianMixture, n: int, seed: int,
               jitter: Optional[float] = DEFAULT_JITTER) -> EntropyEstimate:
    """Monte-Carlo entropy -(1/n) sum log p(x_i); the oracle for every bound."""
    if n < 100:
        raise ValueError("Monte-Carlo entropy needs n >= 100")
    xs = sample_mixture(m, n, seed)
    logp = mixture_log_density_batch(m, xs, jitter)
    value = -float(np.mean(logp))
    se = float(np.std(logp, ddof=1) / np.sqrt(n))
    return EntropyEstimate(value, EstimatorKind.MONTE_CARLO, std_error=se, n_samples=n)


def moment_upper_bound(m: GaussianMixture,
                       jitter: Optional[float] = DEFAULT_JITTER) -> EntropyEstimate:
    """Entropy of the moment-matched Gaussian; an upper bound by max-entropy."""
    mean, cov = mixture_moments(m)
    g = Gaussian.from_cov(mean, cov)
    inner = gaussian_entropy(g, jitter)
    return EntropyEstimate(inner.value, EstimatorKind.MOMENT_UPPER)


# ---------------------------------------------------------------------------
# Pairwise-distance family:  H_D = sum_i w_i H(p_i)
#                                  - sum_i w_i log sum_j w_j exp(-D(p_i, p_j))
# with D = Bhattacharyya for the lower bound and D = KL for the upper bound.
# ---------------------------------------------------------------------------

def _pairwise_divergence_terms(comps, side: str):
    """Per-pair constants so D_ij = quad(mu_i - mu_j; Q_ij) + c_ij.

    quad(d; Q) = d^T Q d.  Only the means stay differentiable; covariance
    pieces are folded into Q_ij and c_ij.
    """
    n = len(comps)
    dim = comps[0].dim
    logdets = [2.0 * float(np.sum(np.log(np.diag(c.cov_factor)))) for c in comps]
    covs = [c.cov for c in comps]
    qmats = np.zeros((n, n, dim, dim))
    consts = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if side == "lower":
                mid = 0.5 * (covs[i] + covs[j])
                chol = np.linalg.cholesky(mid)
                inv = np.linalg.inv(mid)
                logdet_mid = 2.0 * float(np.sum(np.log(np.diag(chol))))
                qmats[i, j] = inv / 8.0
                consts[i, j] = 0.5 * (logdet_mid - 0.5 * (logdets[i] + logdets[j]))
            else:
                inv_j = np.linalg.inv(covs[j])
                trace = float(np.trace(inv_j @ covs[i]))
                qmats[i, j] = 0.5 * inv_j
                consts[i, j] = 0.5 * (trace - dim + logdets[j] - logdets[i])
    return qmats, consts


def pairwise_bound_graph(tape: Tape, means: Var, m: GaussianMixture, side: str,
                         jitter: Optional[float] = DEFAULT_JITTER) -> Var:
    """Record the pairwise bound on ``tape`` with ``means`` (n, d) differentiable."""
    if side not in ("lower", "upper"):
        raise ValueError("side must be 'lower' or 'upper'")
    comps = [_require_full_rank(c, jitter) for c in m.components]
    w = m.weights
    keep = w > 0.0
    if not np.all(keep):
        comps = [c for c, k in zip(comps, keep) if k]
        means = ad.gather_rows(means, np.flatnonzero(keep))
        w = w[keep] / np.sum(w[keep])
    n = len(comps)
    comp_entropies = np.array([gaussian_entropy(c, jitter=None).value for c in comps])
    qmats, consts = _pairwise_divergence_terms(comps, side)
    logw = np.log(w)

    cols = []
    for j in range(n):
        mu_j = ad.gather_rows(means, [j])                    # (1, d)
        diffs = ad.sub(means, mu_j)                          # (n, d), row i = mu_i - mu_j
        quads = []
        for i in range(n):
            d_i = ad.gather_rows(diffs, [i])                 # (1, d)
            right = ad.matmul(d_i, qmats[i, j])              # (1, d)
            quads.append(ad.sum_(ad.mul(right, d_i), axis=1, keepdims=True))
        d_col = ad.add(ad.concat(quads, axis=0), consts[:, j][:, np.newaxis])
        cols.append(ad.add(ad.neg(d_col), logw[j]))          # log w_j - D_ij
    scores = ad.concat(cols, axis=1)                         # (n, n)
    lse = ad.logsumexp(scores, axis=1)                       # (n,)
    return ad.sub(float(np.dot(w, comp_entropies)), ad.sum_(ad.mul(lse, w)))


def pairwise_bound(m: GaussianMixture, side: str,
                   jitter: Optional[float] = DEFAULT_JITTER) -> EntropyEstimate:
    """Kolchinsky-Tracey pairwise-distance bound (lower or upper side)."""
    tape = Tape()
    means = tape.constant(np.stack([c.mean for c in m.components]))
    out = pairwise_bound_graph(tape, means, m, side, jitter)
    kind = EstimatorKind.PAIRWISE_LOWER if side == "lower" else EstimatorKind.PAIRWISE_UPPER
    return EntropyEstimate(float(out.value), kind)


def pairwise_bound_mean_grad(m: GaussianMixture, side: str,
                             jitter: Optional[float] = DEFAULT_JITTER
                             ) -> tuple[float, np.ndarray]:
    """Bound value and its gradient with respect to the (n, d) component means."""
    tape = Tape()
    means = tape.leaf(np.stack([c.mean for c in m.components]))
    out = pairwise_bound_graph(tape, means, m, side, jitter)
    grads = ad.grad(tape, out)
    return float(out.value), grads[means]


# ---------------------------------------------------------------------------
# Batch estimators over an (N, K) embedding matrix.
# ---------------------------------------------------------------------------

def logdet_batch_graph(z: Var, beta: float) -> Var:
    """(1/2) log det(I + (K/(N beta)) Zc^T Zc) + (K/2) log(2 pi e beta / K)."""
    n, k = z.value.shape
    centered = ad.sub(z, ad.mean(z, axis=0, keepdims=True))
    gram = ad.matmul(ad.transpose(centered), centered)
    m = ad.symmetrize(ad.add(np.eye(k), ad.mul(gram, k / (n * beta))))
    noise_floor = 0.5 * k * float(np.log(2.0 * np.pi * np.e * beta / k))
    return ad.add(ad.mul(ad.logdet_psd(m), 0.5), noise_floor)


def pairwise_lower_batch_graph(z: Var, beta: float) -> Var:
    """Pairwise lower bound for the uniform mixture of N(z_i, beta I).

    Equal isotropic components collapse the Bhattacharyya distance to
    ||z_i - z_j||^2 / (8 beta), so the bound is a log-sum-exp over pairwise
    squared distances.
    """
    n, k = z.value.shape
    sq_norms = ad.sum_(ad.square(z), axis=1, keepdims=True)        # (N, 1)
    gram = ad.matmul(z, ad.transpose(z))                           # (N, N)
    sq_dists = ad.add(ad.sub(sq_norms, ad.mul(gram, 2.0)), ad.transpose(sq_norms))
    scores = ad.add(ad.mul(sq_dists, -1.0 / (8.0 * beta)), -float(np.log(n)))
    lse = ad.logsumexp(scores, axis=1)
    comp_entropy = 0.5 * k * (_LOG_2PI_E + float(np.log(beta)))
    return ad.sub(comp_entropy, ad.mean(lse))


def moment_batch_graph(z: Var, jitter: float = DEFAULT_JITTER) -> Var:
    """Entropy of the moment-matched Gaussian of the batch (jittered covariance)."""
    n, k = z.value.shape
    centered = ad.sub(z, ad.mean(z, axis=0, keepdims=True))
    cov = ad.mul(ad.matmul(ad.transpose(centered), centered), 1.0 / (n - 1))
    m = ad.symmetrize(ad.add(cov, jitter * np.eye(k)))
    return ad.mul(ad.add(ad.logdet_psd(m), k * _LOG_2PI_E), 0.5)


def batch_entropy_graph(z: Var, kind: str, beta: float) -> Var:
    """Dispatch for the differentiable batch-entropy plugins."""
    if kind == "logdet":
        return logdet_batch_graph(z, beta)
    if kind == "pairwise_lower":
        return pairwise_lower_batch_graph(z, beta)
    if kind == "moment":
        return moment_batch_graph(z)
    raise ValueError(f"unknown batch entropy kind {kind!r}")


def logdet_batch_entropy(z: np.ndarray, beta: float) -> EntropyEstimate:
    """Log-determinant batch entropy estimate of an (N, K) embedding matrix."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("need an (N, K) batch with N >= 2")
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    tape = Tape()
    out = logdet_batch_graph(tape.constant(z), beta)
    return EntropyEstimate(float(out.value), EstimatorKind.LOG_DET, n_samples=z.shape[0])


def logdet_batch_entropy_grad(z: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Value and gradient of the log-det batch estimator with respect to Z."""
    tape = Tape()
    zv = tape.leaf(np.asarray(z, dtype=np.float64))
    out = logdet_batch_graph(zv, beta)
    grads = ad.grad(tape, out)
    return float(out.value), grads[zv]


def pairwise_batch_entropy(z: np.ndarray, beta: float) -> EntropyEstimate:
    """Pairwise lower-bound entropy of the batch-as-mixture N(z_i, beta I)."""
    z = np.asarray(z, dtype=np.float64)
    tape = Tape()
    out = pairwise_lower_batch_graph(tape.constant(z), beta)
    return EntropyEstimate(float(out.value), EstimatorKind.PAIRWISE_LOWER,
                           n_samples=z.shape[0])
