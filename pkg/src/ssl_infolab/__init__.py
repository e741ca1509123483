"""Desk-scale laboratory for entropy-regularized self-supervised learning.

The package bundles exact Gaussian and Gaussian-mixture primitives, a family
of mixture-entropy estimators with a Monte-Carlo oracle, a piecewise-affine
MLP with per-input affine extraction and Gaussian pushforward, differentiable
SSL objectives (the variance/invariance/covariance triplet and variants,
InfoNCE, an information-maximization objective), a deterministic training
harness with entropy diagnostics, a statistical validation toolkit, and an
auditor that evaluates a complete downstream generalization bound on
concrete data.
"""

from ssl_infolab.autodiff import Tape, Var, grad
from ssl_infolab.datagen import PrototypeDataset, nearest_prototype, sample_pairs, two_moons
from ssl_infolab.entropy import (
    EntropyEstimate,
    EstimatorKind,
    gaussian_entropy,
    logdet_batch_entropy,
    mc_entropy,
    moment_upper_bound,
    pairwise_bound,
)
from ssl_infolab.estimators import MinNormLinearProbe, SslEncoder
from ssl_infolab.gaussians import (
    Gaussian,
    GaussianMixture,
    bhattacharyya_distance,
    kl_divergence,
    log_density,
    mixture_moments,
    sample,
)
from ssl_infolab.genbound import (
    BoundInputs,
    BoundReport,
    empirical_rademacher,
    evaluate_bound,
    invariance_loss,
    min_norm_probe,
    projection_residual,
)
from ssl_infolab.losses import (
    EmbeddingBatch,
    SslObjectiveConfig,
    info_objective,
    simclr_infonce,
    vicreg_covariance,
    vicreg_invariance,
    vicreg_total,
    vicreg_variance,
)
from ssl_infolab.network import (
    PwaNetwork,
    RegionAffine,
    affine_extract,
    forward,
    pushforward_gaussian,
)
from ssl_infolab.stats import (
    GmmLabState,
    NormalityReport,
    dagostino_pearson,
    gaussianity_sweep,
    gmm_collapse_run,
    pairwise_distance_histogram,
)
from ssl_infolab.trainer import TrainConfig, TrainTrace, linear_probe, train_ssl

__version__ = "0.1.0"
