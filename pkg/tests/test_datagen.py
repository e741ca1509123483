"""Synthetic data generators: arcs, prototypes, pair sampling, CSV round trips."""

import numpy as np
import pytest

from ssl_infolab.datagen import (
    PrototypeDataset,
    gaussian_view_pairs,
    load_pairs_csv,
    load_points_csv,
    nearest_prototype,
    random_prototype_dataset,
    sample_pairs,
    save_pairs_csv,
    save_points_csv,
    two_moons,
)


class TestTwoMoons:
    def test_noiseless_points_sit_on_arcs(self):
        pts, labels = two_moons(400, 0.0, seed=0)
        upper = pts[labels == 0]
        lower = pts[labels == 1]
        assert np.max(np.abs(np.linalg.norm(upper, axis=1) - 1.0)) <= 1e-12
        assert np.max(np.abs(np.linalg.norm(lower - np.array([1.0, 0.5]), axis=1) - 1.0)) <= 1e-12

    def test_balanced_labels(self):
        _, labels = two_moons(300, 0.1, seed=1)
        assert int(np.sum(labels == 0)) == 150
        assert int(np.sum(labels == 1)) == 150

    def test_class_means_match_arc_centroids(self):
        # Mean of (cos t, sin t) over t in [0, pi] is (0, 2/pi); the second
        # arc is its point reflection through (0.5, 0.25).
        pts, labels = two_moons(1000, 0.1, seed=2)
        c0 = pts[labels == 0].mean(axis=0)
        c1 = pts[labels == 1].mean(axis=0)
        np.testing.assert_allclose(c0, [0.0, 2 / np.pi], atol=0.02)
        np.testing.assert_allclose(c1, [1.0, 0.5 - 2 / np.pi], atol=0.02)

    def test_odd_n_rejected(self):
        with pytest.raises(ValueError):
            two_moons(7, 0.1, seed=0)


class TestPrototypes:
    def test_sample_pairs_zero_noise_returns_prototypes(self):
        ds = random_prototype_dataset(5, 3, seed=3, noise_scale=0.0)
        x, xp, labels = sample_pairs(ds, 64, seed=4)
        for xi, xpi, lab in zip(x, xp, labels):
            idx = nearest_prototype(ds, xi)
            assert np.array_equal(xi, xpi)
            assert np.any(np.all(ds.prototypes == xi, axis=1))
            assert ds.labels[idx] == lab

    def test_single_prototype_single_label(self):
        ds = random_prototype_dataset(1, 2, seed=5, n_classes=1)
        _, _, labels = sample_pairs(ds, 32, seed=6)
        assert np.all(labels == ds.labels[0])

    def test_prototype_counts_binomial(self):
        ds = random_prototype_dataset(4, 2, seed=7, noise_scale=0.0, n_classes=2)
        x, _, _ = sample_pairs(ds, 100_000, seed=8)
        n, p = 100_000, 0.25
        bound = 3 * np.sqrt(n * p * (1 - p))
        for proto in ds.prototypes:
            count = int(np.sum(np.all(x == proto, axis=1)))
            assert abs(count - n * p) < bound

    def test_pairs_share_prototype_label(self):
        ds = random_prototype_dataset(6, 3, seed=9, noise_scale=0.05)
        x, xp, labels = sample_pairs(ds, 200, seed=10)
        for xi, xpi, lab in zip(x, xp, labels):
            assert ds.labels[nearest_prototype(ds, xi)] == lab
            assert ds.labels[nearest_prototype(ds, xpi)] == lab

    def test_bitwise_reproducible(self):
        ds = random_prototype_dataset(4, 3, seed=11)
        a = sample_pairs(ds, 50, seed=12)
        b = sample_pairs(ds, 50, seed=12)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestNearestPrototype:
    def test_prototype_maps_to_itself(self):
        ds = random_prototype_dataset(8, 4, seed=13)
        for i in range(8):
            assert nearest_prototype(ds, ds.prototypes[i]) == i

    def test_isotropic_equal_covariances_reduce_to_euclidean(self):
        protos = np.array([[0.0, 0.0], [4.0, 0.0]])
        factors = np.repeat(np.eye(2)[np.newaxis], 2, axis=0)
        ds = PrototypeDataset(protos, factors, np.array([0, 1]))
        assert nearest_prototype(ds, np.array([1.0, 0.5])) == 0
        assert nearest_prototype(ds, np.array([3.0, -0.5])) == 1

    def test_anisotropic_matches_brute_force(self):
        ds = random_prototype_dataset(6, 2, seed=15, rank=2)
        rng = np.random.default_rng(16)
        covs = np.einsum("nij,nkj->nik", ds.tangent_factors, ds.tangent_factors)
        for _ in range(50):
            x = 4.0 * rng.standard_normal(2)
            forms = [(x - p) @ c @ (x - p) for p, c in zip(ds.prototypes, covs)]
            assert nearest_prototype(ds, x) == int(np.argmin(forms))


class TestConstruction:
    def test_separation_floor_enforced(self):
        protos = np.array([[0.0, 0.0], [0.5, 0.0]])
        factors = np.repeat(np.eye(2)[np.newaxis], 2, axis=0)
        with pytest.raises(ValueError):
            PrototypeDataset(protos, factors, np.array([0, 1]), separation_floor=1.0)

    def test_random_dataset_obeys_floor(self):
        ds = random_prototype_dataset(10, 3, seed=17, separation_floor=1.5)
        diffs = ds.prototypes[:, None, :] - ds.prototypes[None, :, :]
        dists = np.linalg.norm(diffs, axis=2)
        np.fill_diagonal(dists, np.inf)
        assert dists.min() >= 1.5

    def test_low_rank_tangent_covariances(self):
        ds = random_prototype_dataset(4, 5, seed=19, rank=2)
        for f in ds.tangent_factors:
            cov = f @ f.T
            evals = np.linalg.eigvalsh(cov)
            assert int(np.sum(evals > 1e-10)) == 2


class TestViewPairs:
    def test_views_center_on_points(self):
        pts = np.random.default_rng(20).standard_normal((2000, 3))
        x, xp = gaussian_view_pairs(pts, 0.1, seed=21)
        assert np.abs((x - pts).mean()) < 0.01
        assert np.abs((xp - pts).mean()) < 0.01
        assert not np.array_equal(x, xp)

    def test_zero_noise_views_equal_points(self):
        pts = np.ones((5, 2))
        x, xp = gaussian_view_pairs(pts, 0.0, seed=22)
        assert np.array_equal(x, pts) and np.array_equal(xp, pts)


class TestCsv:
    def test_points_round_trip(self, tmp_path):
        pts, labels = two_moons(40, 0.05, seed=23)
        path = tmp_path / "pts.csv"
        save_points_csv(path, pts, labels)
        back_pts, back_labels = load_points_csv(path)
        assert np.array_equal(back_pts, pts)
        assert np.array_equal(back_labels, labels)

    def test_pairs_round_trip(self, tmp_path):
        ds = random_prototype_dataset(3, 4, seed=24)
        x, xp, labels = sample_pairs(ds, 20, seed=25)
        path = tmp_path / "pairs.csv"
        save_pairs_csv(path, x, xp, labels)
        bx, bxp, bl = load_pairs_csv(path)
        assert np.array_equal(bx, x) and np.array_equal(bxp, xp)
        assert np.array_equal(bl, labels)

    def test_missing_label_column_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x0,x1\n1.0,2.0\n")
        with pytest.raises(ValueError):
            load_points_csv(path)
