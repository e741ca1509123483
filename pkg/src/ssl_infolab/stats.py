"""Empirical validation toolkit: omnibus normality testing of network
outputs, pairwise-distance support analysis, and a gradient-ascent GMM
laboratory that reproduces representation collapse.

The normality test composes the standard skewness and kurtosis
normalizing transforms into the K^2 omnibus statistic against chi^2(2);
the constants are validated by the null-uniformity property tests rather
than against any external implementation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

from ssl_infolab.datagen import PrototypeDataset
from ssl_infolab.network import PwaNetwork, forward_batch


class InsufficientSamplesError(ValueError):
    """The omnibus test needs at least 20 samples."""


class NumericalAbort(RuntimeError):
    """Non-finite likelihood; carries the trace collected so far."""

    def __init__(self, message: str, trace):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# Omnibus normality test.
# ---------------------------------------------------------------------------

def _skewness_z(x: np.ndarray) -> float:
    """Normalizing transform of the sample skewness (D'Agostino 1970)."""
    n = x.shape[0]
    centered = x - x.mean()
    m2 = np.mean(centered ** 2)
    m3 = np.mean(centered ** 3)
    g1 = m3 / m2 ** 1.5
    y = g1 * np.sqrt((n + 1.0) * (n + 3.0) / (6.0 * (n - 2.0)))
    beta2 = (3.0 * (n ** 2 + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0)
             / ((n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0)))
    w2 = -1.0 + np.sqrt(2.0 * (beta2 - 1.0))
    delta = 1.0 / np.sqrt(0.5 * np.log(w2))
    alpha = np.sqrt(2.0 / (w2 - 1.0))
    ya = y / alpha
    return float(delta * np.log(ya + np.sqrt(ya ** 2 + 1.0)))


def _kurtosis_z(x: np.ndarray) -> float:
    """Normalizing transform of the sample kurtosis (Anscombe-Glynn 1983)."""
    n = x.shape[0]
    centered = x - x.mean()
    m2 = np.mean(centered ** 2)
    m4 = np.mean(centered ** 4)
    b2 = m4 / m2 ** 2
    mean_b2 = 3.0 * (n - 1.0) / (n + 1.0)
    var_b2 = (24.0 * n * (n - 2.0) * (n - 3.0)
              / ((n + 1.0) ** 2 * (n + 3.0) * (n + 5.0)))
    xs = (b2 - mean_b2) / np.sqrt(var_b2)
    sqrt_beta1 = (6.0 * (n ** 2 - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0))
                  * np.sqrt(6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0))))
    a = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + np.sqrt(1.0 + 4.0 / sqrt_beta1 ** 2))
    term1 = 1.0 - 2.0 / (9.0 * a)
    denom = 1.0 + xs * np.sqrt(2.0 / (a - 4.0))
    term2 = np.sign(denom) * np.cbrt((1.0 - 2.0 / a) / np.abs(denom))
    return float((term1 - term2) / np.sqrt(2.0 / (9.0 * a)))


def dagostino_pearson(samples: np.ndarray) -> float:
    """Two-sided p-value of the K^2 = Z1^2 + Z2^2 omnibus statistic
    against chi^2(2), whose survival function is exp(-K^2/2)."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.shape[0] < 20:
        raise InsufficientSamplesError(f"need n >= 20 samples, got {x.shape[0]}")
    if np.ptp(x) == 0.0:
        raise ValueError("degenerate sample: all values identical")
    k2 = _skewness_z(x) ** 2 + _kurtosis_z(x) ** 2
    return float(np.exp(-0.5 * k2))


@dataclass(frozen=True)
class NormalityReport:
    """Per-dimension and Bonferroni-combined p-values for one probe Gaussian."""

    noise_scale: float
    prototype_index: int
    n_samples: int
    p_values: np.ndarray          # per output dimension; empty when degenerate
    omnibus_p: float              # min(1, K * min p)
    reject_at_99: bool
    degenerate: bool = False

    def __post_init__(self):
        p = np.asarray(self.p_values, dtype=np.float64)
        if p.size and (np.min(p) < 0.0 or np.max(p) > 1.0):
            raise ValueError("p-values must lie in [0, 1]")
        object.__setattr__(self, "p_values", p)


def gaussianity_sweep(net: PwaNetwork, ds: PrototypeDataset, noise_grid,
                      n_per_point: int = 512, seed: int = 0) -> list:
    """For each input noise level, push per-prototype Gaussian samples through
    the network and test every output dimension for normality.

    Rejection at the 99% level applies a Bonferroni correction across the K
    output dimensions.  A zero noise level produces identical outputs and is
    reported as degenerate (skipped), never rejected.
    """
    noise_grid = list(noise_grid)
    if not noise_grid:
        raise ValueError("noise grid must be non-empty")
    reports = []
    root = np.random.SeedSequence(seed)
    seeds = root.spawn(len(noise_grid) * ds.n_prototypes)
    k_out = net.output_dim
    for gi, sigma in enumerate(noise_grid):
        for pi in range(ds.n_prototypes):
            rng = np.random.default_rng(seeds[gi * ds.n_prototypes + pi])
            if sigma == 0.0:
                reports.append(NormalityReport(sigma, pi, n_per_point, np.zeros(0),
                                               omnibus_p=1.0, reject_at_99=False,
                                               degenerate=True))
                continue
            xs = ds.prototypes[pi] + sigma * rng.standard_normal((n_per_point, ds.dim))
            zs = forward_batch(net, xs)
            pvals = np.empty(k_out)
            for k in range(k_out):
                col = zs[:, k]
                pvals[k] = 1.0 if np.ptp(col) == 0.0 else dagostino_pearson(col)
            omni = min(1.0, k_out * float(np.min(pvals)))
            reports.append(NormalityReport(sigma, pi, n_per_point, pvals,
                                           omnibus_p=omni,
                                           reject_at_99=bool(omni < 0.01)))
    return reports


def rejection_fractions(reports) -> dict:
    """Fraction of non-degenerate prototype tests rejected at 99%, per noise level."""
    out = {}
    for rep in reports:
        if rep.degenerate:
            continue
        tot, rej = out.get(rep.noise_scale, (0, 0))
        out[rep.noise_scale] = (tot + 1, rej + int(rep.reject_at_99))
    return {sigma: rej / tot for sigma, (tot, rej) in out.items()}


def spearman_rho(x, y) -> float:
    """Spearman rank correlation (average ranks on ties)."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty_like(v)
        r[order] = np.arange(1, len(v) + 1, dtype=np.float64)
        for val in np.unique(v):
            mask = v == val
            if np.sum(mask) > 1:
                r[mask] = r[mask].mean()
        return r
    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt(np.sum(rx ** 2) * np.sum(ry ** 2))
    return float(np.sum(rx * ry) / denom) if denom > 0 else 0.0


def pairwise_distance_histogram(points: np.ndarray, n_bins: int
                                ) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Histogram of all n(n-1)/2 pairwise l2 distances.

    Returns (counts, bin_edges, min_distance, median_distance)."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    sq = np.sum(points ** 2, axis=1)
    d2 = sq[:, np.newaxis] + sq[np.newaxis, :] - 2.0 * points @ points.T
    iu = np.triu_indices(n, k=1)
    dists = np.sqrt(np.maximum(d2[iu], 0.0))
    counts, edges = np.histogram(dists, bins=n_bins)
    return counts, edges, float(np.min(dists)), float(np.median(dists))


# ---------------------------------------------------------------------------
# GMM collapse laboratory.
# ---------------------------------------------------------------------------

@dataclass
class GmmLabState:
    """Maximum-likelihood GMM ascent with optionally trainable inputs.

    ``cov_mode="full"`` trains full covariances (identity-initialized);
    ``"fixed_small"`` freezes them at sigma^2 I and trains means only.
    Centroids left as None are initialized from random input samples.
    Learning rates are relaxation fractions in (0, 1]: each step moves every
    trainable block that fraction of the way toward its own maximizer
    (natural-gradient ascent in the EM metric), which keeps the ascent
    bounded at any rate configuration.
    """

    inputs: np.ndarray
    n_centroids: int
    lr_inputs: float
    lr_params: float
    cov_mode: str = "full"                 # full | fixed_small
    sigma_fixed: float = 0.01
    centroids: Optional[np.ndarray] = None
    covariances: Optional[np.ndarray] = None
    jitter: float = 1e-6

    def __post_init__(self):
        if self.cov_mode not in ("full", "fixed_small"):
            raise ValueError("cov_mode must be 'full' or 'fixed_small'")
        if self.cov_mode == "fixed_small" and self.sigma_fixed <= 0:
            raise ValueError("sigma_fixed must be positive")
        if not (0.0 <= self.lr_inputs <= 1.0 and 0.0 <= self.lr_params <= 1.0):
            raise ValueError("learning rates must lie in [0, 1]")
        self.inputs = np.asarray(self.inputs, dtype=np.float64)


@dataclass
class GmmTraceRecord:
    step: int
    centroid_entropy: float
    mean_log_likelihood: float


def _centroid_entropy(centroids: np.ndarray, covs: np.ndarray, jitter: float) -> float:
    """Pairwise lower-bound entropy of the uniform centroid mixture.

    Direct closed-form evaluation (it runs every lab step); agreement with
    :func:`ssl_infolab.entropy.pairwise_bound` is pinned by tests.
    """
    m, d = centroids.shape
    covs = covs + jitter * np.eye(d)
    chols = np.linalg.cholesky(covs)
    logdets = 2.0 * np.sum(np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1)
    comp_h = 0.5 * (d * np.log(2.0 * np.pi * np.e) + logdets)
    dist = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            mid = 0.5 * (covs[i] + covs[j])
            cm = np.linalg.cholesky(mid)
            half = sla.solve_triangular(cm, centroids[i] - centroids[j], lower=True)
            logdet_mid = 2.0 * np.sum(np.log(np.diag(cm)))
            bd = (half @ half) / 8.0 + 0.5 * (logdet_mid - 0.5 * (logdets[i] + logdets[j]))
            dist[i, j] = dist[j, i] = bd
    scores = -dist - np.log(m)
    top = scores.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.sum(np.exp(scores - top), axis=1))
    return float(np.mean(comp_h) - np.mean(lse))


def gmm_collapse_run(lab: GmmLabState, steps: int, seed: int) -> list:
    """Ascend the GMM mean log-likelihood with the configured learning rates;
    per-step trace of the centroid-mixture entropy.

    Each update moves a trainable block ``lr`` of the way toward its
    responsibility-weighted maximizer: centroids toward weighted input means,
    covariances toward weighted scatters, and inputs toward their
    precision-blended centroid targets.  Aborts with :class:`NumericalAbort`
    (trace attached) if the likelihood stops being finite.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = lab.inputs.copy()
    n, d = x.shape
    m = lab.n_centroids
    rng = np.random.default_rng(seed)
    if lab.centroids is None:
        centroids = x[rng.choice(n, size=m, replace=False)].copy()
    else:
        centroids = np.asarray(lab.centroids, dtype=np.float64).copy()
    if lab.cov_mode == "fixed_small":
        covs = np.repeat((lab.sigma_fixed ** 2 * np.eye(d))[np.newaxis], m, axis=0)
    elif lab.covariances is None:
        covs = np.repeat(np.eye(d)[np.newaxis], m, axis=0)
    else:
        covs = np.asarray(lab.covariances, dtype=np.float64).copy()

    trace = []
    logw = -np.log(m)
    eye = np.eye(d)
    for step in range(steps + 1):
        covs_j = covs + lab.jitter * eye
        invs = np.stack([np.linalg.inv(c) for c in covs_j])
        logdets = np.array([np.linalg.slogdet(c)[1] for c in covs_j])
        diffs = x[:, np.newaxis, :] - centroids[np.newaxis, :, :]      # (n, m, d)
        sol = np.einsum("mjk,imk->imj", invs, diffs)                   # Sigma^-1 (x - c)
        quad = np.sum(sol * diffs, axis=2)                             # (n, m)
        logpdf = -0.5 * (d * np.log(2 * np.pi) + logdets[np.newaxis, :] + quad)
        scores = logpdf + logw
        top = scores.max(axis=1, keepdims=True)
        log_mix = top[:, 0] + np.log(np.sum(np.exp(scores - top), axis=1))
        mean_ll = float(np.mean(log_mix))
        entropy = _centroid_entropy(centroids, covs, lab.jitter)
        if not (np.isfinite(mean_ll) and np.isfinite(entropy)):
            raise NumericalAbort(f"non-finite likelihood at step {step}", trace)
        trace.append(GmmTraceRecord(step, entropy, mean_ll))
        if step == steps:
            break
        resp = np.exp(scores - log_mix[:, np.newaxis])                 # (n, m)
        mass = resp.sum(axis=0)                                        # (m,)
        live = mass > 1e-12
        if lab.lr_params > 0 and np.any(live):
            target_c = centroids.copy()
            target_c[live] = (resp.T @ x)[live] / mass[live, np.newaxis]
            if lab.cov_mode == "full":
                new_covs = covs.copy()
                for j in np.flatnonzero(live):
                    centered = x - target_c[j]
                    scatter = (resp[:, j][:, np.newaxis] * centered).T @ centered / mass[j]
                    new_covs[j] = covs[j] + lab.lr_params * (scatter - covs[j])
                covs = new_covs
            centroids = centroids + lab.lr_params * (target_c - centroids)
        if lab.lr_inputs > 0:
            # Blended target: (sum_j r_ij Sigma_j^-1)^-1 sum_j r_ij Sigma_j^-1 c_j
            prec = np.einsum("im,mjk->ijk", resp, invs)                # (n, d, d)
            lead = np.einsum("im,mjk,mk->ij", resp, invs, centroids)   # (n, d)
            target_x = np.stack([np.linalg.solve(prec[i], lead[i]) for i in range(n)])
            x = x + lab.lr_inputs * (target_x - x)
    return trace
