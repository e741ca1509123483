"""Piecewise-affine network: affine extraction, region geometry, pushforward."""

import numpy as np
import pytest
from helpers import max_rel_err

from ssl_infolab import autodiff as ad
from ssl_infolab.autodiff import Tape
from ssl_infolab.gaussians import Gaussian, sample
from ssl_infolab.network import (
    BOUNDARY_WARNINGS,
    BoundaryInputError,
    PwaNetwork,
    activation_patterns,
    affine_extract,
    forward,
    forward_batch,
    forward_batch_op,
    init_network,
    network_params,
    pushforward_gaussian,
    region_matrix_op,
)


def fd_jacobian(net, x, h=1e-6):
    d = x.shape[0]
    jac = np.zeros((net.output_dim, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        jac[:, j] = (forward(net, x + e) - forward(net, x - e)) / (2 * h)
    return jac


class TestForward:
    def test_single_affine_layer(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([0.5, -0.5])
        net = PwaNetwork(((w, b),))
        x = np.array([1.0, -1.0])
        np.testing.assert_allclose(forward(net, x), w @ x + b)

    def test_relu_positive_homogeneity_at_zero(self):
        net = init_network([3, 8, 4], "relu", seed=0)
        layers = tuple((w, np.zeros_like(b)) for w, b in net.layers)
        net0 = PwaNetwork(layers, "relu")
        np.testing.assert_allclose(forward(net0, np.zeros(3)), np.zeros(4))

    def test_forward_matches_affine_extract(self):
        rng = np.random.default_rng(1)
        for act in ("relu", "leaky_relu", "abs"):
            net = init_network([4, 16, 16, 6], act, seed=3)
            x = rng.standard_normal(4)
            region = affine_extract(net, x)
            np.testing.assert_allclose(region.apply(x), forward(net, x),
                                       rtol=1e-10, atol=1e-12)

    def test_batch_forward_agrees_with_rowwise(self):
        net = init_network([3, 10, 5], "leaky_relu", seed=5)
        xs = np.random.default_rng(2).standard_normal((9, 3))
        batch = forward_batch(net, xs)
        rows = np.stack([forward(net, x) for x in xs])
        np.testing.assert_allclose(batch, rows, atol=1e-12)


class TestAffineExtract:
    def test_linear_layer_gives_w_and_b(self):
        w = np.array([[2.0, 0.0], [0.0, 3.0]])
        b = np.array([1.0, -1.0])
        region = affine_extract(PwaNetwork(((w, b),)), np.array([0.3, 0.7]))
        np.testing.assert_allclose(region.a_matrix, w)
        np.testing.assert_allclose(region.b_offset, b)
        assert region.activation_pattern.size == 0

    def test_slope_one_leaky_is_weight_product(self):
        net = init_network([3, 8, 8, 4], "leaky_relu", seed=7, leaky_slope=1.0)
        region = affine_extract(net, np.random.default_rng(3).standard_normal(3))
        prod = net.layers[2][0] @ net.layers[1][0] @ net.layers[0][0]
        np.testing.assert_allclose(region.a_matrix, prod, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_jacobian_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = init_network([4, 20, 20, 6], "relu", seed=seed)
        x = rng.standard_normal(4)
        region = affine_extract(net, x)
        assert max_rel_err(region.a_matrix, fd_jacobian(net, x), floor=1e-6) <= 1e-5

    def test_boundary_error_and_accept_mode(self):
        w = np.array([[1.0, 0.0], [0.0, 1.0]])
        net = PwaNetwork(((w, np.zeros(2)), (np.eye(2), np.zeros(2))), "relu")
        on_boundary = np.array([0.0, 1.0])  # first pre-activation exactly 0
        with pytest.raises(BoundaryInputError):
            affine_extract(net, on_boundary)
        before = BOUNDARY_WARNINGS["count"]
        region = affine_extract(net, on_boundary, on_boundary="accept")
        assert BOUNDARY_WARNINGS["count"] == before + 1
        assert bool(region.activation_pattern[0])  # zero resolves non-negative

    def test_same_region_reproduces_forward(self):
        rng = np.random.default_rng(11)
        net = init_network([3, 16, 16, 4], "relu", seed=11)
        x = rng.standard_normal(3)
        region = affine_extract(net, x)
        hits = 0
        for _ in range(200):
            xp = x + 1e-4 * rng.standard_normal(3)
            if np.array_equal(affine_extract(net, xp).activation_pattern,
                              region.activation_pattern):
                hits += 1
                assert np.linalg.norm(region.apply(xp) - forward(net, xp)) <= 1e-9
        assert hits > 0

    def test_region_consistency_within_margin_ball(self):
        rng = np.random.default_rng(13)
        net = init_network([3, 12, 12, 4], "relu", seed=13)
        x = rng.standard_normal(3)
        # margin: smallest |pre-activation| across hidden units
        h = x
        margin = np.inf
        for w, b in net.layers[:-1]:
            pre = w @ h + b
            margin = min(margin, float(np.min(np.abs(pre))))
            h = net._act(pre)
        assert margin > 1e-6
        lipschitz = np.prod([np.linalg.norm(w, 2) for w, _ in net.layers])
        radius = margin / lipschitz
        pattern = affine_extract(net, x).activation_pattern
        for _ in range(100):
            delta = rng.standard_normal(3)
            delta *= 0.99 * radius / np.linalg.norm(delta)
            assert np.array_equal(
                affine_extract(net, x + delta).activation_pattern, pattern)


class TestPushforward:
    def test_identity_network_is_identity(self):
        net = PwaNetwork(((np.eye(3), np.zeros(3)),))
        g = Gaussian(np.array([1.0, 2.0, 3.0]), 0.5 * np.eye(3))
        image, purity = pushforward_gaussian(net, g, seed=0)
        assert purity == 1.0
        np.testing.assert_allclose(image.mean, g.mean)
        np.testing.assert_allclose(image.cov, g.cov, atol=1e-12)

    def test_zero_covariance_gives_point_mass(self):
        net = init_network([3, 8, 4], "relu", seed=1)
        x = np.random.default_rng(4).standard_normal(3)
        g = Gaussian(x, np.zeros((3, 3)))
        image, purity = pushforward_gaussian(net, g, seed=0)
        assert purity == 1.0
        np.testing.assert_allclose(image.mean, forward(net, x), atol=1e-12)
        np.testing.assert_allclose(image.cov, np.zeros((4, 4)), atol=1e-15)

    def test_small_noise_moments_match_sampling(self):
        rng = np.random.default_rng(21)
        net = init_network([3, 12, 12, 5], "leaky_relu", seed=21, leaky_slope=0.2)
        mu = rng.standard_normal(3)
        sigma = 1e-3
        g = Gaussian(mu, sigma * np.eye(3))
        image, purity = pushforward_gaussian(net, g, seed=2)
        assert purity >= 0.99
        xs = sample(g, 10_000, seed=3)
        ys = forward_batch(net, xs)
        se_mean = np.sqrt(np.diag(image.cov) / len(ys)) + 1e-15
        assert np.all(np.abs(ys.mean(axis=0) - image.mean) < 3 * se_mean + 1e-12)
        emp = np.cov(ys.T)
        dd = np.diag(image.cov)
        se_cov = np.sqrt((np.outer(dd, dd) + image.cov ** 2) / len(ys))
        assert np.all(np.abs(emp - image.cov) < 3 * se_cov + 1e-15)

    def test_purity_monotone_in_sigma(self):
        net = init_network([2, 16, 16, 4], "relu", seed=31)
        mu = np.array([0.4, -0.2])
        purities = []
        for sigma in (1e-4, 1e-3, 1e-2, 1e-1, 1.0):
            _, purity = pushforward_gaussian(net, Gaussian(mu, sigma * np.eye(2)), seed=9)
            purities.append(purity)
        assert all(a >= b for a, b in zip(purities, purities[1:]))


class TestTapeIntegration:
    def test_forward_op_matches_plain_forward(self):
        net = init_network([3, 10, 6], "abs", seed=41)
        xs = np.random.default_rng(5).standard_normal((7, 3))
        tape = Tape()
        params = network_params(tape, net)
        out = forward_batch_op(net, params, xs)
        np.testing.assert_allclose(out.value, forward_batch(net, xs), atol=1e-12)
        assert tape.replay()

    def test_region_matrix_op_matches_affine_extract(self):
        net = init_network([3, 9, 9, 4], "leaky_relu", seed=43)
        x = np.random.default_rng(6).standard_normal(3)
        tape = Tape()
        params = network_params(tape, net)
        a_op = region_matrix_op(net, params, x)
        np.testing.assert_allclose(a_op.value, affine_extract(net, x).a_matrix, atol=1e-12)

    def test_weight_gradients_match_finite_differences(self):
        net = init_network([2, 6, 3], "relu", seed=45)
        xs = np.random.default_rng(7).standard_normal((5, 2))
        tape = Tape()
        params = network_params(tape, net)
        loss = ad.mean(ad.square(forward_batch_op(net, params, xs)))
        grads = ad.grad(tape, loss)
        w0 = net.layers[0][0]
        h = 1e-6
        fd = np.zeros_like(w0)
        for i in range(w0.shape[0]):
            for j in range(w0.shape[1]):
                for sgn in (1, -1):
                    layers = [(w.copy(), b.copy()) for w, b in net.layers]
                    layers[0][0][i, j] += sgn * h
                    val = np.mean(forward_batch(PwaNetwork(tuple(layers), "relu"), xs) ** 2)
                    fd[i, j] += sgn * val / (2 * h)
        assert max_rel_err(grads[params[0][0]], fd, floor=1e-7) < 1e-5


class TestCheckpoint:
    def test_json_round_trip_is_exact(self):
        net = init_network([4, 7, 3], "leaky_relu", seed=50, leaky_slope=0.3)
        back = PwaNetwork.from_json(net.to_json())
        assert back.activation == net.activation
        assert back.leaky_slope == net.leaky_slope
        for (w1, b1), (w2, b2) in zip(net.layers, back.layers):
            assert np.array_equal(w1, w2) and np.array_equal(b1, b2)

    def test_dimension_validation(self):
        with pytest.raises(ValueError):
            PwaNetwork(((np.ones((3, 2)), np.ones(3)), (np.ones((4, 5)), np.ones(4))))
        net = init_network([3, 4, 2], "relu", seed=0)
        with pytest.raises(ValueError):
            forward(net, np.zeros(5))

    def test_patterns_batch_agree_with_extract(self):
        net = init_network([3, 8, 8, 2], "relu", seed=51)
        xs = np.random.default_rng(8).standard_normal((6, 3))
        batch_patterns = activation_patterns(net, xs)
        for i, x in enumerate(xs):
            np.testing.assert_array_equal(batch_patterns[i],
                                          affine_extract(net, x).activation_pattern)
