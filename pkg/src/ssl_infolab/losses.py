"""Differentiable SSL objectives over embedding batches.

Every loss is recorded on an autodiff tape, so the same code path yields
values (pass plain arrays) and gradients (pass :class:`Var` leaves).  The
VICReg triplet applies its variance hinge and covariance penalty per view by
default; the alternative reading that builds one covariance matrix from the
stacked views sits behind ``cov_mode="concatenated"``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from ssl_infolab import autodiff as ad
from ssl_infolab.autodiff import Tape, Var
from ssl_infolab.entropy import batch_entropy_graph

OBJECTIVE_NAMES = ("vicreg", "vicreg+pairwise", "vicreg+logdet", "infonce",
                   "info_objective", "invariance_only")

ArrayOrVar = Union[np.ndarray, Var]


@dataclass(frozen=True)
class EmbeddingBatch:
    """Paired view embeddings; row i of z and z_prime come from the same source."""

    z: np.ndarray
    z_prime: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        zp = np.asarray(self.z_prime, dtype=np.float64)
        if z.ndim != 2 or z.shape != zp.shape:
            raise ValueError(f"views must share an (N, K) shape, got {z.shape} vs {zp.shape}")
        if z.shape[0] < 2:
            raise ValueError("batch size must be >= 2")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "z_prime", zp)


@dataclass(frozen=True)
class SslObjectiveConfig:
    """Hyperparameters selecting and weighting a loss variant.

    The variance weight, covariance weight, and invariance weight are
    independent knobs; the hinge target of the variance term is a separate
    parameter from the invariance weight even though both are often written
    with the same letter.
    """

    alpha: float = 25.0
    beta_cov: float = 1.0
    gamma_inv: float = 25.0
    gamma_target: float = 1.0
    epsilon: float = 1e-4
    entropy_plugin: str = "none"        # none | pairwise_lower | logdet
    temperature: float = 0.5
    logdet_beta: float = 1.0
    entropy_weight: float = 1.0
    cov_mode: str = "per_view"          # per_view | concatenated

    def __post_init__(self):
        if self.alpha < 0 or self.beta_cov < 0 or self.gamma_inv < 0:
            raise ValueError("loss weights must be non-negative")
        if self.gamma_target <= 0:
            raise ValueError("gamma_target must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.logdet_beta <= 0:
            raise ValueError("logdet_beta must be positive")
        if self.entropy_plugin not in ("none", "pairwise_lower", "logdet"):
            raise ValueError(f"unknown entropy_plugin {self.entropy_plugin!r}")
        if self.cov_mode not in ("per_view", "concatenated"):
            raise ValueError(f"unknown cov_mode {self.cov_mode!r}")


def _as_var(x: ArrayOrVar) -> tuple[Var, bool]:
    """Lift an array onto a fresh tape; Vars pass through untouched."""
    if isinstance(x, Var):
        return x, False
    tape = Tape()
    return tape.constant(np.asarray(x, dtype=np.float64)), True


def _maybe_float(out: Var, ephemeral: bool):
    return float(out.value) if ephemeral else out


def _covariance(z: Var) -> Var:
    n = z.value.shape[0]
    centered = ad.sub(z, ad.mean(z, axis=0, keepdims=True))
    return ad.mul(ad.matmul(ad.transpose(centered), centered), 1.0 / (n - 1))


def _variance_graph(z: Var, cfg: SslObjectiveConfig) -> Var:
    c_diag = ad.diag_part(_covariance(z))
    std = ad.sqrt(ad.add(c_diag, cfg.epsilon))
    return ad.mean(ad.hinge(ad.sub(cfg.gamma_target, std)))


def _covariance_penalty_graph(z: Var) -> Var:
    k = z.value.shape[1]
    c = _covariance(z)
    sq = ad.square(c)
    off_sum = ad.sub(ad.sum_(sq), ad.sum_(ad.diag_part(sq)))
    return ad.mul(off_sum, 1.0 / k)


def _invariance_graph(z: Var, zp: Var) -> Var:
    n = z.value.shape[0]
    return ad.mul(ad.sum_(ad.square(ad.sub(z, zp))), 1.0 / n)


def vicreg_variance(z: ArrayOrVar, cfg: SslObjectiveConfig) -> Union[float, Var]:
    """(1/K) sum_k max(0, gamma_target - sqrt(C_kk + eps))."""
    zv, ephemeral = _as_var(z)
    return _maybe_float(_variance_graph(zv, cfg), ephemeral)


def vicreg_covariance(z: ArrayOrVar) -> Union[float, Var]:
    """(1/K) sum of squared off-diagonal covariance entries."""
    zv, ephemeral = _as_var(z)
    return _maybe_float(_covariance_penalty_graph(zv), ephemeral)


def vicreg_invariance(b_or_z, z_prime: Optional[ArrayOrVar] = None) -> Union[float, Var]:
    """(1/N) sum_i ||z_i - z'_i||^2."""
    if isinstance(b_or_z, EmbeddingBatch):
        z, zp = b_or_z.z, b_or_z.z_prime
    else:
        z, zp = b_or_z, z_prime
    if isinstance(z, Var) or isinstance(zp, Var):
        tape = z.tape if isinstance(z, Var) else zp.tape
        zv = z if isinstance(z, Var) else tape.constant(np.asarray(z, dtype=np.float64))
        zpv = zp if isinstance(zp, Var) else tape.constant(np.asarray(zp, dtype=np.float64))
        return _invariance_graph(zv, zpv)
    tape = Tape()
    out = _invariance_graph(tape.constant(np.asarray(z, dtype=np.float64)),
                            tape.constant(np.asarray(zp, dtype=np.float64)))
    return float(out.value)


def _vicreg_total_graph(z: Var, zp: Var, cfg: SslObjectiveConfig) -> tuple[Var, dict]:
    inv = _invariance_graph(z, zp)
    if cfg.cov_mode == "concatenated":
        cat = ad.concat([z, zp], axis=0)
        var_term = _variance_graph(cat, cfg)
        cov_term = _covariance_penalty_graph(cat)
        total = ad.add(ad.add(ad.mul(var_term, cfg.alpha), ad.mul(cov_term, cfg.beta_cov)),
                       ad.mul(inv, cfg.gamma_inv))
        terms = {"variance": float(var_term.value), "covariance": float(cov_term.value),
                 "invariance": float(inv.value)}
        return total, terms
    var_z, var_zp = _variance_graph(z, cfg), _variance_graph(zp, cfg)
    cov_z, cov_zp = _covariance_penalty_graph(z), _covariance_penalty_graph(zp)
    total = ad.mul(ad.add(var_z, var_zp), cfg.alpha)
    total = ad.add(total, ad.mul(ad.add(cov_z, cov_zp), cfg.beta_cov))
    total = ad.add(total, ad.mul(inv, cfg.gamma_inv))
    terms = {"variance": float(var_z.value) + float(var_zp.value),
             "covariance": float(cov_z.value) + float(cov_zp.value),
             "invariance": float(inv.value)}
    return total, terms


def vicreg_total(b: EmbeddingBatch, cfg: SslObjectiveConfig) -> float:
    """Weighted VICReg triplet: variance + covariance per view, shared invariance."""
    tape = Tape()
    z, zp = tape.constant(b.z), tape.constant(b.z_prime)
    total, _ = _vicreg_total_graph(z, zp, cfg)
    return float(total.value)


def _infonce_graph(z: Var, zp: Var, cfg: SslObjectiveConfig) -> Var:
    for v in (z, zp):
        norms = np.linalg.norm(v.value, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("zero-norm embedding row cannot be l2-normalized")
    z_hat = _l2_normalize(z)
    zp_hat = _l2_normalize(zp)
    sims = ad.mul(ad.matmul(zp_hat, ad.transpose(z_hat)), 1.0 / cfg.temperature)
    pos = ad.diag_part(sims)           # <zp_i, z_i> / eta
    lse = ad.logsumexp(sims, axis=0)   # over candidates zp_k for each z_i
    return ad.mean(ad.sub(lse, pos))


def _l2_normalize(z: Var) -> Var:
    norms = ad.sqrt(ad.sum_(ad.square(z), axis=1, keepdims=True))
    return ad.mul(z, ad.reciprocal(norms))


def simclr_infonce(b: EmbeddingBatch, cfg: SslObjectiveConfig) -> float:
    """InfoNCE with in-batch negatives and internal l2 normalization."""
    tape = Tape()
    total = _infonce_graph(tape.constant(b.z), tape.constant(b.z_prime), cfg)
    return float(total.value)


def infonce_graph(z: Var, zp: Var, cfg: SslObjectiveConfig) -> Var:
    return _infonce_graph(z, zp, cfg)


def _info_objective_graph(z: Var, zp: Var, sigmas_z: Sequence, sigmas_zp: Sequence,
                          entropy_of_z, cfg: SslObjectiveConfig,
                          jitter: float = 0.0) -> Var:
    n = z.value.shape[0]
    logdets = []
    for sig in list(sigmas_z) + list(sigmas_zp):
        m = ad.symmetrize(sig) if isinstance(sig, Var) else \
            z.tape.constant(0.5 * (np.asarray(sig) + np.asarray(sig).T))
        if jitter:
            m = ad.add(m, jitter * np.eye(m.value.shape[0]))
        logdets.append(ad.logdet_psd(m))
    logdet_sum = logdets[0]
    for ld in logdets[1:]:
        logdet_sum = ad.add(logdet_sum, ld)
    inv = ad.mul(ad.sum_(ad.square(ad.sub(z, zp))), 0.5 / n)
    h_term = entropy_of_z if isinstance(entropy_of_z, Var) else z.tape.constant(entropy_of_z)
    return ad.add(ad.add(ad.mul(h_term, -cfg.entropy_weight), ad.mul(logdet_sum, 1.0 / n)), inv)


def info_objective(b: EmbeddingBatch, sigmas: tuple, entropy_of_z: float,
                   cfg: SslObjectiveConfig, jitter: float = 0.0) -> float:
    """Information-maximization loss: minus the batch entropy term, plus the
    mean per-sample pushforward log-determinants and half the view MSE.

    ``sigmas`` is a pair of sequences of per-row K x K covariance matrices
    (one sequence per view), full-rank after ``jitter``.
    """
    tape = Tape()
    z, zp = tape.constant(b.z), tape.constant(b.z_prime)
    out = _info_objective_graph(z, zp, sigmas[0], sigmas[1], entropy_of_z, cfg, jitter)
    return float(out.value)


def info_objective_graph(z: Var, zp: Var, sigmas_z, sigmas_zp, entropy_of_z,
                         cfg: SslObjectiveConfig, jitter: float = 0.0) -> Var:
    return _info_objective_graph(z, zp, sigmas_z, sigmas_zp, entropy_of_z, cfg, jitter)


# ---------------------------------------------------------------------------
# Named-objective dispatch used by the trainer and CLI.
# ---------------------------------------------------------------------------

def objective_graph(name: str, z: Var, zp: Var, cfg: SslObjectiveConfig,
                    sigmas: Optional[tuple] = None) -> tuple[Var, dict]:
    """Graph and per-term float logs for one named objective on Var views."""
    if name == "vicreg":
        return _vicreg_total_graph(z, zp, cfg)
    if name in ("vicreg+pairwise", "vicreg+logdet"):
        total, terms = _vicreg_total_graph(z, zp, cfg)
        kind = "pairwise_lower" if name.endswith("pairwise") else "logdet"
        ent = batch_entropy_graph(ad.concat([z, zp], axis=0), kind, cfg.logdet_beta)
        total = ad.sub(total, ad.mul(ent, cfg.entropy_weight))
        terms["entropy_bonus"] = float(ent.value)
        return total, terms
    if name == "invariance_only":
        inv = _invariance_graph(z, zp)
        return ad.mul(inv, cfg.gamma_inv), {"invariance": float(inv.value)}
    if name == "infonce":
        total = _infonce_graph(z, zp, cfg)
        return total, {"infonce": float(total.value)}
    if name == "info_objective":
        if sigmas is None:
            raise ValueError("info_objective needs per-row pushforward covariances")
        plugin = cfg.entropy_plugin if cfg.entropy_plugin != "none" else "moment"
        ent = batch_entropy_graph(ad.concat([z, zp], axis=0), plugin, cfg.logdet_beta)
        total = _info_objective_graph(z, zp, sigmas[0], sigmas[1], ent, cfg)
        return total, {"batch_entropy": float(ent.value)}
    raise ValueError(f"unknown objective {name!r}; expected one of {OBJECTIVE_NAMES}")


def config_with_overrides(cfg: SslObjectiveConfig, **kwargs) -> SslObjectiveConfig:
    return replace(cfg, **kwargs)
