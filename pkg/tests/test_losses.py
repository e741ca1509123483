"""SSL objectives against naive-loop oracles and finite differences."""

import numpy as np
import pytest
from helpers import central_fd, max_rel_err
from hypothesis import given, settings
from hypothesis import strategies as st

from ssl_infolab import autodiff as ad
from ssl_infolab.autodiff import Tape
from ssl_infolab.losses import (
    EmbeddingBatch,
    SslObjectiveConfig,
    infonce_graph,
    info_objective,
    info_objective_graph,
    objective_graph,
    simclr_infonce,
    vicreg_covariance,
    vicreg_invariance,
    vicreg_total,
    vicreg_variance,
)

CFG = SslObjectiveConfig()


def random_batch(seed, n=12, k=5, spread=1.0):
    rng = np.random.default_rng(seed)
    z = spread * rng.standard_normal((n, k))
    zp = z + 0.2 * rng.standard_normal((n, k))
    return EmbeddingBatch(z, zp)


def naive_variance(z, cfg):
    n, k = z.shape
    total = 0.0
    for kk in range(k):
        c = z[:, kk] - z[:, kk].mean()
        var = (c @ c) / (n - 1)
        total += max(0.0, cfg.gamma_target - np.sqrt(var + cfg.epsilon))
    return total / k


def naive_covariance(z):
    n, k = z.shape
    zc = z - z.mean(axis=0)
    c = zc.T @ zc / (n - 1)
    total = 0.0
    for a in range(k):
        for b in range(k):
            if a != b:
                total += c[a, b] ** 2
    return total / k


def naive_invariance(z, zp):
    return sum(float(np.sum((z[i] - zp[i]) ** 2)) for i in range(len(z))) / len(z)


def naive_infonce(z, zp, eta):
    zh = z / np.linalg.norm(z, axis=1, keepdims=True)
    zph = zp / np.linalg.norm(zp, axis=1, keepdims=True)
    total = 0.0
    for i in range(len(z)):
        num = np.exp(zph[i] @ zh[i] / eta)
        den = sum(np.exp(zph[k] @ zh[i] / eta) for k in range(len(z)))
        total += -np.log(num / den)
    return total / len(z)


class TestVicregTerms:
    def test_variance_hinge_inactive_when_std_large(self):
        z = 10.0 * np.random.default_rng(0).standard_normal((32, 4))
        assert vicreg_variance(z, CFG) == 0.0

    def test_variance_constant_batch(self):
        z = np.ones((8, 4))
        assert vicreg_variance(z, CFG) == pytest.approx(1.0 - 0.01, abs=1e-12)

    def test_variance_matches_naive(self):
        z = np.random.default_rng(1).standard_normal((16, 6))
        assert vicreg_variance(z, CFG) == pytest.approx(naive_variance(z, CFG), abs=1e-12)

    def test_covariance_zero_when_decorrelated(self):
        z = np.zeros((4, 2))
        z[:, 0] = [1.0, 1.0, -1.0, -1.0]
        z[:, 1] = [1.0, -1.0, 1.0, -1.0]
        assert vicreg_covariance(z) == pytest.approx(0.0, abs=1e-15)

    def test_covariance_symmetric_offdiagonal(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((64, 2))
        zc = z - z.mean(axis=0)
        c01 = (zc[:, 0] @ zc[:, 1]) / (len(z) - 1)
        assert vicreg_covariance(z) == pytest.approx(c01 ** 2, rel=1e-10)

    def test_covariance_matches_naive(self):
        z = np.random.default_rng(3).standard_normal((20, 5))
        assert vicreg_covariance(z) == pytest.approx(naive_covariance(z), abs=1e-10)

    def test_invariance_identical_views(self):
        b = random_batch(4)
        assert vicreg_invariance(EmbeddingBatch(b.z, b.z.copy())) == 0.0

    def test_invariance_uniform_shift(self):
        b = random_batch(5)
        c = np.array([1.0, -2.0, 0.5, 0.0, 3.0])
        b2 = EmbeddingBatch(b.z, b.z + c)
        assert vicreg_invariance(b2) == pytest.approx(float(c @ c), rel=1e-12)

    def test_invariance_matches_naive(self):
        b = random_batch(6)
        assert vicreg_invariance(b) == pytest.approx(naive_invariance(b.z, b.z_prime),
                                                     abs=1e-12)


class TestVicregTotal:
    def test_zero_weights_zero_loss(self):
        cfg = SslObjectiveConfig(alpha=0.0, beta_cov=0.0, gamma_inv=0.0)
        assert vicreg_total(random_batch(7), cfg) == 0.0

    def test_pure_invariance_identical_views(self):
        cfg = SslObjectiveConfig(alpha=0.0, beta_cov=0.0, gamma_inv=1.0)
        b = random_batch(8)
        assert vicreg_total(EmbeddingBatch(b.z, b.z.copy()), cfg) == 0.0

    def test_compositional_sum(self):
        b = random_batch(9)
        expected = (CFG.alpha * (vicreg_variance(b.z, CFG) + vicreg_variance(b.z_prime, CFG))
                    + CFG.beta_cov * (vicreg_covariance(b.z) + vicreg_covariance(b.z_prime))
                    + CFG.gamma_inv * vicreg_invariance(b))
        assert vicreg_total(b, CFG) == pytest.approx(expected, rel=1e-12)

    def test_concatenated_mode_uses_stacked_views(self):
        cfg = SslObjectiveConfig(cov_mode="concatenated")
        b = random_batch(10)
        cat = np.vstack([b.z, b.z_prime])
        expected = (cfg.alpha * vicreg_variance(cat, cfg)
                    + cfg.beta_cov * vicreg_covariance(cat)
                    + cfg.gamma_inv * vicreg_invariance(b))
        assert vicreg_total(b, cfg) == pytest.approx(expected, rel=1e-12)

    def test_hinge_boundary_gradient_is_zero(self):
        # Per-dimension std exactly at the target: inactive side, zero gradient.
        n, k = 16, 3
        rng = np.random.default_rng(11)
        z = rng.standard_normal((n, k))
        z = (z - z.mean(axis=0)) / z.std(axis=0, ddof=1)
        cfg = SslObjectiveConfig(alpha=1.0, beta_cov=0.0, gamma_inv=0.0,
                                 gamma_target=float(np.sqrt(1.0 + 1e-4)))
        tape = Tape()
        zv = tape.leaf(z)
        total, _ = objective_graph("vicreg", zv, tape.constant(z.copy()), cfg)
        assert float(total.value) == 0.0
        grads = ad.grad(tape, total)
        np.testing.assert_allclose(grads.get(zv, np.zeros_like(z)), 0.0, atol=1e-15)


class TestInfoNce:
    def test_two_orthogonal_rows(self):
        z = np.array([[1.0, 0.0], [0.0, 1.0]])
        cfg = SslObjectiveConfig(temperature=1.0)
        expected = -np.log(np.e / (np.e + 1.0))
        assert simclr_infonce(EmbeddingBatch(z, z.copy()), cfg) == pytest.approx(expected)

    def test_high_temperature_limit_is_log_n(self):
        b = random_batch(12, n=10)
        cfg = SslObjectiveConfig(temperature=1e9)
        assert simclr_infonce(b, cfg) == pytest.approx(np.log(10), abs=1e-6)

    def test_matches_naive_double_loop(self):
        b = random_batch(13)
        cfg = SslObjectiveConfig(temperature=0.5)
        assert simclr_infonce(b, cfg) == pytest.approx(
            naive_infonce(b.z, b.z_prime, 0.5), abs=1e-8)

    def test_zero_norm_row_rejected(self):
        z = np.ones((3, 2))
        z[1] = 0.0
        with pytest.raises(ValueError):
            simclr_infonce(EmbeddingBatch(z, np.ones((3, 2))), CFG)


class TestInfoObjective:
    def test_pure_entropy_term(self):
        b = random_batch(14)
        sig = [np.eye(5) for _ in range(12)]
        v = info_objective(EmbeddingBatch(b.z, b.z.copy()), (sig, sig), 2.5, CFG)
        assert v == pytest.approx(-2.5 * CFG.entropy_weight, abs=1e-12)

    def test_doubling_one_sigma(self):
        b = random_batch(15)
        sig = [np.eye(5) for _ in range(12)]
        sig2 = [s.copy() for s in sig]
        sig2[4] = 2.0 * np.eye(5)
        base = info_objective(EmbeddingBatch(b.z, b.z.copy()), (sig, sig), 1.0, CFG)
        bumped = info_objective(EmbeddingBatch(b.z, b.z.copy()), (sig2, sig), 1.0, CFG)
        assert bumped - base == pytest.approx(5 * np.log(2.0) / 12, rel=1e-10)

    def test_matches_termwise_recomputation(self):
        rng = np.random.default_rng(16)
        n, k = 6, 3
        b = random_batch(17, n=n, k=k)
        sig_z = [np.eye(k) + 0.1 * np.diag(rng.uniform(0, 1, k)) for _ in range(n)]
        sig_zp = [np.eye(k) + 0.1 * np.diag(rng.uniform(0, 1, k)) for _ in range(n)]
        h = 1.7
        expected = (-CFG.entropy_weight * h
                    + np.mean([np.linalg.slogdet(s)[1] for s in sig_z])
                    + np.mean([np.linalg.slogdet(s)[1] for s in sig_zp])
                    + 0.5 * np.mean(np.sum((b.z - b.z_prime) ** 2, axis=1)))
        assert info_objective(b, (sig_z, sig_zp), h, CFG) == pytest.approx(expected,
                                                                           rel=1e-10)


class TestGradients:
    @pytest.mark.parametrize("name", ["vicreg", "vicreg+pairwise", "vicreg+logdet",
                                      "infonce", "invariance_only"])
    def test_objective_gradients_match_finite_differences(self, name):
        b = random_batch(18, n=8, k=4, spread=0.8)
        cfg = SslObjectiveConfig(temperature=0.7)

        def value(z_flat):
            tape = Tape()
            zv = tape.constant(z_flat.reshape(8, 4))
            zpv = tape.constant(b.z_prime)
            total, _ = objective_graph(name, zv, zpv, cfg)
            return float(total.value)

        tape = Tape()
        zv = tape.leaf(b.z)
        zpv = tape.constant(b.z_prime)
        total, _ = objective_graph(name, zv, zpv, cfg)
        grads = ad.grad(tape, total)
        fd = central_fd(value, b.z.ravel().copy()).reshape(8, 4)
        assert max_rel_err(grads[zv], fd, floor=1e-6) <= 1e-4

    def test_info_objective_gradients_including_sigmas(self):
        rng = np.random.default_rng(19)
        n, k = 5, 3
        b = random_batch(20, n=n, k=k)
        sig0 = np.stack([np.eye(k) + 0.2 * np.diag(rng.uniform(0, 1, k))
                         for _ in range(n)])

        def value_z(z_flat):
            return info_objective(EmbeddingBatch(z_flat.reshape(n, k), b.z_prime),
                                  (list(sig0), [np.eye(k)] * n), 0.9, CFG)

        tape = Tape()
        zv = tape.leaf(b.z)
        zpv = tape.constant(b.z_prime)
        sig_vars = [tape.leaf(s) for s in sig0]
        eye_consts = [tape.constant(np.eye(k)) for _ in range(n)]
        total = info_objective_graph(zv, zpv, sig_vars, eye_consts, 0.9, CFG)
        grads = ad.grad(tape, total)
        fd_z = central_fd(value_z, b.z.ravel().copy()).reshape(n, k)
        assert max_rel_err(grads[zv], fd_z, floor=1e-6) <= 1e-4

        def value_sig(flat):
            sigs = list(flat.reshape(n, k, k))
            return info_objective(b, (sigs, [np.eye(k)] * n), 0.9, CFG)

        fd_sig = central_fd(value_sig, sig0.ravel().copy()).reshape(n, k, k)
        got = np.stack([grads[sv] for sv in sig_vars])
        assert max_rel_err(got, fd_sig, floor=1e-6) <= 1e-4

    def test_infonce_graph_gradient(self):
        b = random_batch(21, n=6, k=3)
        cfg = SslObjectiveConfig(temperature=0.5)

        def value(z_flat):
            return naive_infonce(z_flat.reshape(6, 3), b.z_prime, 0.5)

        tape = Tape()
        zv = tape.leaf(b.z)
        total = infonce_graph(zv, tape.constant(b.z_prime), cfg)
        grads = ad.grad(tape, total)
        fd = central_fd(value, b.z.ravel().copy()).reshape(6, 3)
        assert max_rel_err(grads[zv], fd, floor=1e-6) <= 1e-4


class TestInvariances:
    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=20, deadline=None)
    def test_row_permutation_leaves_losses_unchanged(self, seed):
        rng = np.random.default_rng(seed)
        b = random_batch(seed, n=10, k=4)
        perm = rng.permutation(10)
        bp = EmbeddingBatch(b.z[perm], b.z_prime[perm])
        cfg = SslObjectiveConfig(temperature=0.6)
        assert abs(vicreg_total(b, cfg) - vicreg_total(bp, cfg)) <= 1e-10
        assert abs(simclr_infonce(b, cfg) - simclr_infonce(bp, cfg)) <= 1e-10
        assert abs(vicreg_invariance(b) - vicreg_invariance(bp)) <= 1e-10

    def test_batch_validation(self):
        with pytest.raises(ValueError):
            EmbeddingBatch(np.ones((1, 3)), np.ones((1, 3)))
        with pytest.raises(ValueError):
            EmbeddingBatch(np.ones((4, 3)), np.ones((4, 2)))
        with pytest.raises(ValueError):
            SslObjectiveConfig(epsilon=0.0)
        with pytest.raises(ValueError):
            SslObjectiveConfig(entropy_plugin="bogus")
