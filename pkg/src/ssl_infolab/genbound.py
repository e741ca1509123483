"""Downstream generalization-bound auditor.

Evaluates, on concrete labeled and unlabeled data, every term of the complete
high-probability bound

    E ||W_S f(x) - y||  <=  c * I(f) + (2/sqrt(m)) ||P_unl Y_unl||_F
                             + (1/sqrt(n)) ||P_lab Y_lab||_F + Q_{m,n}

where I(f) is the mean view-invariance distance, P_Z projects onto the
orthogogonal complement of the embedding row space, and Q collects the
concentration terms.  Suprema over infinite hypothesis spaces are
uncomputable, so the Rademacher terms and the data-independent constants are
estimated over a finite encoder ensemble and reported as such.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ssl_infolab.network import PwaNetwork, forward_batch, init_network

Encoder = Union[PwaNetwork, Callable[[np.ndarray], np.ndarray]]

SVD_RELATIVE_TOL = 1e-10


def _embed(f: Encoder, xs: np.ndarray) -> np.ndarray:
    if isinstance(f, PwaNetwork):
        return forward_batch(f, xs)
    return np.asarray(f(xs), dtype=np.float64)


def invariance_loss(f: Encoder, x_pos: np.ndarray, x_pos2: np.ndarray) -> float:
    """Mean Euclidean (not squared) distance between paired view embeddings."""
    if len(x_pos) < 1:
        raise ValueError("need at least one pair")
    d = _embed(f, x_pos) - _embed(f, x_pos2)
    return float(np.mean(np.linalg.norm(d, axis=1)))


def _row_space_basis(z: np.ndarray) -> np.ndarray:
    """Orthonormal basis (n, r) of the row space of the (d, n) matrix z."""
    _u, s, vt = np.linalg.svd(z, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((z.shape[1], 0))
    rank = int(np.sum(s > SVD_RELATIVE_TOL * s[0]))
    return vt[:rank].T


def projection_matrix(z: np.ndarray) -> np.ndarray:
    """Dense P = I - Z^T (Z Z^T)^+ Z, the projector onto null(Z)."""
    z = np.asarray(z, dtype=np.float64)
    v = _row_space_basis(z)
    return np.eye(z.shape[1]) - v @ v.T


def projection_residual(z: np.ndarray, y: np.ndarray) -> float:
    """||P_Z Y||_F with the pseudoinverse via rank-revealing SVD
    (singular values below 1e-10 of the largest count as zero)."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, np.newaxis]
    if z.shape[1] != y.shape[0]:
        raise ValueError(f"z has {z.shape[1]} columns but y has {y.shape[0]} rows")
    v = _row_space_basis(z)
    resid = y - v @ (v.T @ y)
    return float(np.linalg.norm(resid))


def min_norm_probe(z: np.ndarray, y: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """W = Y^T Z^T (Z Z^T)^+ for ridge = 0; adds ridge * I before inversion
    otherwise.  Among least-squares minimizers the ridgeless W has minimal
    Frobenius norm."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, np.newaxis]
    if z.shape[1] != y.shape[0]:
        raise ValueError(f"z has {z.shape[1]} columns but y has {y.shape[0]} rows")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if ridge > 0:
        gram = z @ z.T + ridge * np.eye(z.shape[0])
        return np.linalg.solve(gram, z @ y).T
    u, s, vt = np.linalg.svd(z, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((y.shape[1], z.shape[0]))
    rank = int(np.sum(s > SVD_RELATIVE_TOL * s[0]))
    return (y.T @ vt[:rank].T / s[:rank]) @ u[:, :rank].T


def spectral_norm(m: np.ndarray, n_iter: int = 100, tol: float = 1e-10) -> float:
    """Largest singular value by power iteration on M^T M."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return 0.0
    v = np.full(m.shape[1], 1.0 / np.sqrt(m.shape[1]))
    sigma = 0.0
    for _ in range(n_iter):
        w = m.T @ (m @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v_new = w / norm
        sigma_new = float(np.linalg.norm(m @ v_new))
        if abs(sigma_new - sigma) <= tol * max(sigma_new, 1.0):
            return sigma_new
        v, sigma = v_new, sigma_new
    return sigma


def pair_distances(f: Encoder, x_pos: np.ndarray, x_pos2: np.ndarray) -> np.ndarray:
    return np.linalg.norm(_embed(f, x_pos) - _embed(f, x_pos2), axis=1)


def empirical_rademacher(values_per_function: np.ndarray, n_sign_draws: int,
                         seed: int) -> float:
    """(1/sqrt(m)) E_xi [ max_f sum_i xi_i v_f[i] ] over a finite function set.

    ``values_per_function`` has shape (n_functions, m).  When 2^m does not
    exceed ``n_sign_draws`` the expectation is computed exactly over all sign
    patterns; otherwise it is a seeded Monte-Carlo average.  A finite set can
    only under-estimate the supremum over the full class, so the result is a
    lower estimate of the true complexity.
    """
    vals = np.atleast_2d(np.asarray(values_per_function, dtype=np.float64))
    if vals.shape[0] < 1:
        raise ValueError("need a non-empty function set")
    if n_sign_draws < 1:
        raise ValueError("n_sign_draws must be >= 1")
    m = vals.shape[1]
    if m <= 60 and 2 ** m <= n_sign_draws:
        signs = np.array(np.meshgrid(*([[-1.0, 1.0]] * m), indexing="ij")).reshape(m, -1).T
    else:
        rng = np.random.default_rng(seed)
        signs = rng.choice([-1.0, 1.0], size=(n_sign_draws, m))
    sums = signs @ vals.T                     # (draws, n_functions)
    return float(np.mean(np.max(sums, axis=1)) / np.sqrt(m))


def rademacher_invariance(ensemble: Sequence[Encoder], x_pos: np.ndarray, x_pos2: np.ndarray,
                          n_sign_draws: int = 2048, seed: int = 0) -> float:
    """Normalized Rademacher complexity of the pair-distance family over the ensemble."""
    if len(ensemble) == 0:
        raise ValueError("ensemble must be non-empty")
    vals = np.stack([pair_distances(f, x_pos, x_pos2) for f in ensemble])
    return empirical_rademacher(vals, n_sign_draws, seed)


def one_hot_labels(labels: np.ndarray, classes: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    y = np.zeros((labels.shape[0], classes.shape[0]))
    for j, c in enumerate(classes):
        y[labels == c, j] = 1.0
    return y


@dataclass(frozen=True)
class BoundInputs:
    """Everything the auditor needs: data, encoder, confidence, and the finite
    ensemble standing in for the hypothesis space."""

    labeled_x: np.ndarray
    labeled_y: np.ndarray          # integer class labels, length n
    unlabeled_x: np.ndarray        # first views x+
    unlabeled_x2: np.ndarray       # second views x++
    unlabeled_y: np.ndarray        # labels of the pairs (known to the harness)
    encoder: Encoder
    delta: float
    ensemble: tuple = ()
    test_x: Optional[np.ndarray] = None
    test_y: Optional[np.ndarray] = None
    true_class_probs: Optional[dict] = None   # p(y) override; defaults to empirical
    n_sign_draws: int = 2048
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")
        if len(self.labeled_x) < 1 or len(self.unlabeled_x) < 1:
            raise ValueError("need n >= 1 labeled points and m >= 1 unlabeled pairs")
        if len(self.unlabeled_x) != len(self.unlabeled_x2):
            raise ValueError("unlabeled views must pair up")


@dataclass
class BoundReport:
    """Every measured term of the bound plus the final certified value."""

    invariance_loss: float
    proj_unlabeled_term: float
    proj_labeled_term: float
    rademacher_term: float          # normalized invariance complexity over the ensemble
    rademacher_probe_term: float    # normalized complexity of the probe-residual family
    constants: dict                 # kappa_s, kappa_sbar, kappa, tau, tau_sbar, c, zeta
    class_probs: dict               # per-class empirical and assumed marginals
    q_mn: float
    total_bound: float
    informal_decomposition: dict
    measured_test_loss: Optional[float]
    n_labeled: int
    m_unlabeled: int
    delta: float
    ensemble_provenance: list = field(default_factory=list)

    def to_json(self) -> str:
        doc = {}
        for k, v in self.__dict__.items():
            if isinstance(v, dict):
                doc[k] = {str(kk): (float(vv) if np.isscalar(vv) else vv)
                          for kk, vv in v.items()}
            elif isinstance(v, (int, float)) or v is None:
                doc[k] = v
            else:
                doc[k] = v
        return json.dumps(doc, sort_keys=True, indent=2)

    def csv_line(self) -> str:
        cols = [self.invariance_loss, self.proj_unlabeled_term, self.proj_labeled_term,
                self.rademacher_term, self.q_mn, self.total_bound,
                self.measured_test_loss if self.measured_test_loss is not None else float("nan")]
        return ",".join(repr(float(c)) for c in cols)

    @staticmethod
    def csv_header() -> str:
        return ("invariance_loss,proj_unlabeled_term,proj_labeled_term,"
                "rademacher_term,q_mn,total_bound,measured_test_loss")


def q_from_constants(constants: dict, m: int, n: int, delta: float,
                     p_hat: dict, p_true: dict,
                     rademacher_term: float, rademacher_probe_term: float) -> float:
    """Assemble Q_{m,n} exactly as displayed, from frozen constants."""
    c = constants["c"]
    tau, tau_sbar = constants["tau"], constants["tau_sbar"]
    kappa_s, kappa_sbar, kappa = constants["kappa_s"], constants["kappa_sbar"], constants["kappa"]
    n_classes = len(p_hat)
    sum_sqrt = sum(np.sqrt(p_hat[y]) + np.sqrt(p_true[y]) for y in p_hat)
    q = c * (2.0 * rademacher_term / np.sqrt(m)
             + tau * np.sqrt(np.log(3.0 / delta) / (2.0 * m))
             + tau_sbar * np.sqrt(np.log(3.0 / delta) / (2.0 * n)))
    q += kappa_s * np.sqrt(2.0 * np.log(6.0 * n_classes / delta) / (2.0 * n)) * sum_sqrt
    q += 4.0 * rademacher_probe_term / np.sqrt(m)
    q += 2.0 * kappa * np.sqrt(np.log(4.0 / delta) / (2.0 * m))
    q += 2.0 * kappa_sbar * np.sqrt(np.log(4.0 / delta) / (2.0 * n))
    return float(q)


def make_ensemble(trained: PwaNetwork, size: int = 8, seed: int = 0,
                  perturb_scale: float = 0.05) -> tuple[list, list]:
    """Trained encoder + re-initialized and noise-perturbed variants."""
    nets = [trained]
    provenance = ["trained"]
    rng = np.random.default_rng(seed)
    dims = [trained.input_dim] + [w.shape[0] for w, _ in trained.layers]
    half = (size - 1) // 2
    for i in range(half):
        nets.append(init_network(dims, trained.activation, seed=int(rng.integers(2 ** 62)),
                                 leaky_slope=trained.leaky_slope))
        provenance.append("reinit")
    while len(nets) < size:
        layers = tuple(
            (w + perturb_scale * rng.standard_normal(w.shape),
             b + perturb_scale * rng.standard_normal(b.shape))
            for w, b in trained.layers)
        nets.append(PwaNetwork(layers, trained.activation, trained.leaky_slope))
        provenance.append("perturbed")
    return nets, provenance


def evaluate_bound(inputs: BoundInputs, ensemble_provenance: Optional[list] = None
                   ) -> BoundReport:
    """Measure every constant from the data and assemble the certified bound."""
    f = inputs.encoder
    classes = np.unique(np.concatenate([np.asarray(inputs.labeled_y),
                                        np.asarray(inputs.unlabeled_y)]))
    y_lab = one_hot_labels(inputs.labeled_y, classes)       # (n, r)
    y_unl = one_hot_labels(inputs.unlabeled_y, classes)     # (m, r)
    n = len(inputs.labeled_x)
    m = len(inputs.unlabeled_x)

    z_lab = _embed(f, inputs.labeled_x).T                   # (d, n)
    z_unl = _embed(f, inputs.unlabeled_x).T                 # (d, m)

    inv = invariance_loss(f, inputs.unlabeled_x, inputs.unlabeled_x2)
    proj_unl = 2.0 / np.sqrt(m) * projection_residual(z_unl, y_unl)
    proj_lab = 1.0 / np.sqrt(n) * projection_residual(z_lab, y_lab)

    w_s = min_norm_probe(z_lab, y_lab)
    w_sbar = min_norm_probe(z_unl, y_unl)
    c = spectral_norm(w_s - w_sbar)

    # Per-sample losses over every point whose label we hold.
    eval_x = [inputs.labeled_x, inputs.unlabeled_x, inputs.unlabeled_x2]
    eval_y = [y_lab, y_unl, y_unl]
    if inputs.test_x is not None:
        eval_x.append(inputs.test_x)
        eval_y.append(one_hot_labels(inputs.test_y, classes))
    all_x = np.concatenate(eval_x)
    all_y = np.concatenate(eval_y)
    z_all = _embed(f, all_x).T

    def max_loss(w, z, y):
        return float(np.max(np.linalg.norm((w @ z).T - y, axis=1)))

    kappa_s = max_loss(w_s, z_all, all_y)
    kappa_sbar = max_loss(w_sbar, z_all, all_y)

    ensemble = list(inputs.ensemble) if inputs.ensemble else [f]
    tau_sbar = float(np.max(pair_distances(f, inputs.unlabeled_x, inputs.unlabeled_x2)))
    tau = max(float(np.max(pair_distances(g, inputs.unlabeled_x, inputs.unlabeled_x2)))
              for g in ensemble)

    # kappa ranges over the probe class: per-encoder min-norm probes on both sets.
    kappa = 0.0
    probe_residuals = []
    for g in ensemble:
        zg_lab = _embed(g, inputs.labeled_x).T
        zg_unl = _embed(g, inputs.unlabeled_x).T
        zg_all = _embed(g, all_x).T
        for w_g in (min_norm_probe(zg_lab, y_lab), min_norm_probe(zg_unl, y_unl)):
            kappa = max(kappa, max_loss(w_g, zg_all, all_y))
            resid = np.linalg.norm((w_g @ zg_unl).T - y_unl, axis=1)
            probe_residuals.append(resid)

    seeds = np.random.SeedSequence(inputs.seed).spawn(2)
    rad_inv = rademacher_invariance(ensemble, inputs.unlabeled_x, inputs.unlabeled_x2,
                                    inputs.n_sign_draws,
                                    int(seeds[0].generate_state(1)[0]))
    rad_probe = empirical_rademacher(np.stack(probe_residuals), inputs.n_sign_draws,
                                     int(seeds[1].generate_state(1)[0]))

    zeta = float(np.max(np.linalg.norm(all_y, axis=1)))
    p_hat = {int(cl): float(np.mean(np.asarray(inputs.labeled_y) == cl)) for cl in classes}
    if inputs.true_class_probs is not None:
        p_true = {int(cl): float(inputs.true_class_probs[int(cl)]) for cl in classes}
    else:
        p_true = dict(p_hat)

    constants = {"c": c, "tau": tau, "tau_sbar": tau_sbar, "kappa_s": kappa_s,
                 "kappa_sbar": kappa_sbar, "kappa": kappa, "zeta": zeta}
    for name, val in constants.items():
        if not np.isfinite(val):
            raise FloatingPointError(f"bound constant {name} is not finite")

    q = q_from_constants(constants, m, n, inputs.delta, p_hat, p_true, rad_inv, rad_probe)
    total = c * inv + proj_unl + proj_lab + q
    for name, val in (("invariance", inv), ("proj_unlabeled", proj_unl),
                      ("proj_labeled", proj_lab), ("q_mn", q), ("total", total)):
        if not np.isfinite(val):
            raise FloatingPointError(f"bound term {name} is not finite")

    measured = None
    if inputs.test_x is not None:
        z_test = _embed(f, inputs.test_x).T
        y_test = one_hot_labels(inputs.test_y, classes)
        measured = float(np.mean(np.linalg.norm((w_s @ z_test).T - y_test, axis=1)))

    informal = {
        "invariance_loss": inv,
        "proj_unlabeled_term": proj_unl,
        "proj_labeled_term": proj_lab,
        "rademacher_over_sqrt_m": 2.0 * rad_inv / np.sqrt(m),
        "log2_ensemble_size": float(np.log2(max(len(ensemble), 1))),
    }
    return BoundReport(
        invariance_loss=inv,
        proj_unlabeled_term=proj_unl,
        proj_labeled_term=proj_lab,
        rademacher_term=rad_inv,
        rademacher_probe_term=rad_probe,
        constants=constants,
        class_probs={"empirical": p_hat, "assumed": p_true},
        q_mn=q,
        total_bound=float(total),
        informal_decomposition=informal,
        measured_test_loss=measured,
        n_labeled=n,
        m_unlabeled=m,
        delta=inputs.delta,
        ensemble_provenance=ensemble_provenance or ["trained"] * len(ensemble),
    )
