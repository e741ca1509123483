"""Normality testing, distance histograms, and the GMM collapse laboratory."""

import numpy as np
import pytest

from ssl_infolab.datagen import random_prototype_dataset, two_moons
from ssl_infolab.entropy import pairwise_bound
from ssl_infolab.gaussians import Gaussian, GaussianMixture
from ssl_infolab.network import init_network
from ssl_infolab.stats import (
    GmmLabState,
    InsufficientSamplesError,
    _centroid_entropy,
    dagostino_pearson,
    gaussianity_sweep,
    gmm_collapse_run,
    pairwise_distance_histogram,
    rejection_fractions,
    spearman_rho,
)


class TestDagostinoPearson:
    def test_gaussian_null_rarely_rejected(self):
        rng = np.random.default_rng(0)
        hits = sum(dagostino_pearson(rng.standard_normal(10_000)) > 0.01
                   for _ in range(100))
        assert hits >= 95

    def test_uniform_alternative_strongly_rejected(self):
        rng = np.random.default_rng(1)
        assert dagostino_pearson(rng.uniform(0, 1, 10_000)) < 1e-6

    def test_null_pvalues_are_uniform(self):
        rng = np.random.default_rng(2)
        ps = np.sort([dagostino_pearson(rng.standard_normal(500)) for _ in range(500)])
        grid = np.arange(1, 501) / 500
        ks = float(np.max(np.abs(ps - grid)))
        assert ks < 0.08

    def test_affine_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(400)
        p = dagostino_pearson(x)
        assert abs(dagostino_pearson(-2.5 * x + 7.0) - p) <= 1e-10
        assert abs(dagostino_pearson(0.001 * x) - p) <= 1e-10

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSamplesError):
            dagostino_pearson(np.arange(19, dtype=float))

    def test_degenerate_sample_rejected(self):
        with pytest.raises(ValueError):
            dagostino_pearson(np.full(100, 3.0))


class TestGaussianitySweep:
    def make_ds(self):
        return random_prototype_dataset(10, 3, seed=4, separation_floor=2.0, spread=4.0)

    def test_linear_network_stays_at_nominal_rate(self):
        ds = self.make_ds()
        net = init_network([3, 5], "relu", seed=5)  # single layer: affine map
        reports = gaussianity_sweep(net, ds, [0.05, 0.2, 1.0], n_per_point=512, seed=6)
        fr = rejection_fractions(reports)
        n_tests = len([r for r in reports if not r.degenerate])
        overall = np.mean(list(fr.values()))
        assert overall <= 0.01 + 3 * np.sqrt(0.01 * 0.99 / n_tests)

    def test_zero_noise_reported_degenerate(self):
        ds = self.make_ds()
        net = init_network([3, 8, 4], "relu", seed=7)
        reports = gaussianity_sweep(net, ds, [0.0, 0.1], n_per_point=64, seed=8)
        zero = [r for r in reports if r.noise_scale == 0.0]
        assert zero and all(r.degenerate and not r.reject_at_99 for r in zero)
        assert all(r.p_values.size == 0 for r in zero)

    def test_deep_relu_rejection_grows_with_noise(self):
        ds = self.make_ds()
        net = init_network([3, 32, 32, 32, 5], "relu", seed=9)
        grid = [0.02, 0.1, 0.3, 1.0, 3.0]
        reports = gaussianity_sweep(net, ds, grid, n_per_point=512, seed=10)
        fr = rejection_fractions(reports)
        rho = spearman_rho(grid, [fr[s] for s in grid])
        assert rho > 0.0

    def test_report_pvalues_in_range(self):
        ds = self.make_ds()
        net = init_network([3, 16, 4], "abs", seed=11)
        for r in gaussianity_sweep(net, ds, [0.5], n_per_point=128, seed=12):
            assert 0.0 <= r.omnibus_p <= 1.0
            assert np.all((r.p_values >= 0) & (r.p_values <= 1))


class TestSpearman:
    def test_perfect_monotone(self):
        assert spearman_rho([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
        assert spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)

    def test_constant_series_is_zero(self):
        assert spearman_rho([1, 2, 3], [5, 5, 5]) == 0.0


class TestPairwiseDistanceHistogram:
    def test_two_identical_points(self):
        counts, edges, dmin, dmed = pairwise_distance_histogram(np.ones((2, 3)), 4)
        assert dmin == 0.0 and dmed == 0.0
        assert counts.sum() == 1

    def test_simplex_corners_equidistant(self):
        pts = np.eye(3)
        counts, edges, dmin, dmed = pairwise_distance_histogram(pts, 5)
        assert dmin == pytest.approx(np.sqrt(2.0))
        assert dmed == pytest.approx(np.sqrt(2.0))
        assert counts.sum() == 3

    def test_matches_brute_force_bin_for_bin(self):
        pts, _ = two_moons(200, 0.05, seed=13)
        counts, edges, dmin, _ = pairwise_distance_histogram(pts, 20)
        brute = []
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                brute.append(np.linalg.norm(pts[i] - pts[j]))
        brute_counts, _ = np.histogram(brute, bins=edges)
        np.testing.assert_array_equal(counts, brute_counts)
        assert dmin == pytest.approx(min(brute), rel=1e-12)
        assert dmin > 0.0

    def test_total_count_exact(self):
        pts = np.random.default_rng(14).standard_normal((37, 4))
        counts, _, _, _ = pairwise_distance_histogram(pts, 11)
        assert counts.sum() == 37 * 36 // 2


class TestGmmLab:
    def test_fast_entropy_matches_pairwise_bound(self):
        rng = np.random.default_rng(15)
        centroids = rng.standard_normal((5, 2))
        covs = np.stack([np.eye(2) * s for s in rng.uniform(0.2, 2.0, 5)])
        fast = _centroid_entropy(centroids, covs, jitter=0.0)
        comps = tuple(Gaussian.from_cov(c, s) for c, s in zip(centroids, covs))
        ref = pairwise_bound(GaussianMixture(comps), "lower").value
        assert fast == pytest.approx(ref, rel=1e-10)

    def test_zero_learning_rates_constant_trace(self):
        pts, _ = two_moons(60, 0.05, seed=16)
        lab = GmmLabState(inputs=pts, n_centroids=4, lr_inputs=0.0, lr_params=0.0)
        trace = gmm_collapse_run(lab, steps=10, seed=17)
        entropies = {r.centroid_entropy for r in trace}
        lls = {r.mean_log_likelihood for r in trace}
        assert len(entropies) == 1 and len(lls) == 1

    def test_fixed_inputs_fit_improves_likelihood(self):
        pts, _ = two_moons(100, 0.05, seed=18)
        lab = GmmLabState(inputs=pts, n_centroids=6, lr_inputs=0.0, lr_params=0.05)
        trace = gmm_collapse_run(lab, steps=200, seed=19)
        assert trace[-1].mean_log_likelihood > trace[0].mean_log_likelihood

    def test_trainable_inputs_collapse(self):
        pts, _ = two_moons(100, 0.05, seed=20)
        lab = GmmLabState(inputs=pts, n_centroids=6, lr_inputs=0.05, lr_params=0.05)
        trace = gmm_collapse_run(lab, steps=400, seed=21)
        assert trace[-1].centroid_entropy <= 0.5 * trace[0].centroid_entropy

    def test_fixed_small_covariance_does_not_collapse(self):
        pts, _ = two_moons(100, 0.05, seed=22)
        lab = GmmLabState(inputs=pts, n_centroids=6, lr_inputs=0.05, lr_params=0.05,
                          cov_mode="fixed_small", sigma_fixed=0.01)
        trace = gmm_collapse_run(lab, steps=400, seed=23)
        assert abs(trace[-1].centroid_entropy - trace[0].centroid_entropy) < 0.5

    def test_learning_rate_validation(self):
        pts = np.zeros((10, 2))
        with pytest.raises(ValueError):
            GmmLabState(inputs=pts, n_centroids=2, lr_inputs=2.0, lr_params=0.1)
        with pytest.raises(ValueError):
            GmmLabState(inputs=pts, n_centroids=2, lr_inputs=0.1, lr_params=0.1,
                        cov_mode="diag")

    def test_non_finite_likelihood_aborts_with_trace(self):
        from ssl_infolab.stats import NumericalAbort
        pts = np.zeros((10, 2))
        pts[0, 0] = np.nan
        lab = GmmLabState(inputs=pts, n_centroids=2, lr_inputs=0.1, lr_params=0.1)
        with pytest.raises(NumericalAbort) as info:
            gmm_collapse_run(lab, steps=5, seed=24)
        assert isinstance(info.value.trace, list)
