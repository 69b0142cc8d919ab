import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adasde.dataset import (
    MixtureScoreOracle,
    PointCloud,
    double_circle_oracle,
    load_points_csv,
    make_double_circle,
    make_gaussian,
    make_gaussian_mixture,
    oracle_log_density,
    oracle_score,
    sample_oracle,
    save_points_csv,
)


def fd_grad(fn, x, h=1e-5):
    g = np.empty_like(x)
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        g[:, k] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


@pytest.fixture(scope="module")
def ring_oracle():
    return double_circle_oracle(n_points=500, seed=3)


class TestDoubleCircle:
    def test_shape_and_radii(self):
        d = make_double_circle(n_points=2001, noise_sigma=0.0, seed=0)
        r = np.linalg.norm(d.points, axis=1)
        assert len(d) == 2001
        np.testing.assert_allclose(r[:1001], 0.8)
        np.testing.assert_allclose(r[1001:], 0.6)

    def test_deterministic(self):
        a = make_double_circle(n_points=100, seed=5)
        b = make_double_circle(n_points=100, seed=5)
        c = make_double_circle(n_points=100, seed=6)
        assert np.array_equal(a.points, b.points)
        assert not np.array_equal(a.points, c.points)

    def test_oracle_centers_are_the_clean_rings(self):
        noisy = make_double_circle(n_points=400, seed=2)
        oracle = double_circle_oracle(n_points=400, seed=2)
        resid = noisy.points - oracle.centers.points
        assert oracle.base_sigma == 0.1
        assert 0.08 < resid.std() < 0.12

    def test_invalid_cloud(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, np.nan]]))


class TestOracleScore:
    def test_matches_fd_of_log_density(self, ring_oracle):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1.2, 1.2, (200, 2))
        for t in (0.05, 0.3, 2.0):
            g = oracle_score(ring_oracle, x, t)
            fd = fd_grad(lambda y: oracle_log_density(ring_oracle, y, t), x)
            rel = np.linalg.norm(g - fd, axis=1) / np.maximum(np.linalg.norm(g, axis=1), 1e-8)
            assert rel.max() < 1e-5

    def test_single_gaussian_closed_form(self):
        o = MixtureScoreOracle.from_points(np.array([[0.3, -0.2]]), base_sigma=0.5)
        x = np.array([[1.0, 1.0], [0.0, 0.0]])
        expect = -(x - [0.3, -0.2]) / (0.25 + 0.49)
        np.testing.assert_allclose(oracle_score(o, x, 0.7), expect, rtol=1e-13)

    def test_symmetric_mixture_zero_score_at_center(self):
        o = MixtureScoreOracle.from_points(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]), 0.1)
        np.testing.assert_allclose(oracle_score(o, np.zeros(2), 0.4), 0.0, atol=1e-14)

    def test_large_t_is_prior_score(self, ring_oracle):
        x = np.random.default_rng(1).normal(0, 80, (100, 2))
        s = oracle_score(ring_oracle, x, 80.0)
        prior = -x / 80.0**2
        rel = np.linalg.norm(s - prior, axis=1) / np.linalg.norm(prior, axis=1)
        assert rel.max() < 0.02

    def test_blocking_does_not_change_result(self, ring_oracle, monkeypatch):
        import adasde.dataset as ds

        x = np.random.default_rng(2).uniform(-1, 1, (300, 2))
        full = oracle_score(ring_oracle, x, 0.1)
        monkeypatch.setattr(ds, "_BLOCK_ELEMS", 1000)
        np.testing.assert_allclose(oracle_score(ring_oracle, x, 0.1), full, rtol=1e-10, atol=1e-12)

    def test_rejects_zero_noise(self, ring_oracle):
        with pytest.raises(ValueError):
            oracle_score(ring_oracle, np.zeros(2), 0.0)

    def test_denoise_is_tweedie(self, ring_oracle):
        x = np.array([[0.5, 0.1]])
        np.testing.assert_allclose(ring_oracle.denoise(x, 0.3), x + 0.09 * ring_oracle.score(x, 0.3))

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.01, 5.0), st.floats(-2, 2), st.floats(-2, 2))
    def test_score_finite_far_away(self, t, a, b):
        o = double_circle_oracle(n_points=50, seed=0)
        s = oracle_score(o, np.array([a * 1e3, b * 1e3]), t)
        assert np.all(np.isfinite(s))


class TestSampling:
    def test_moments_of_marginal(self, ring_oracle):
        s = sample_oracle(ring_oracle, 200000, seed=0, t=0.5)
        c = ring_oracle.centers.points
        expect = np.trace(np.cov(c.T, bias=True)) + 2 * (0.25 + 0.01)
        assert abs(np.trace(np.cov(s.points.T)) - expect) / expect < 0.01

    def test_generators(self):
        g = make_gaussian(50000, 0.5, seed=0, mean=(1.0, 2.0))
        np.testing.assert_allclose(g.points.mean(axis=0), [1, 2], atol=0.01)
        np.testing.assert_allclose(g.points.std(axis=0), 0.5, rtol=0.02)
        m = make_gaussian_mixture(1000, [[0, 0], [5, 5]], 0.1, seed=0)
        assert set(np.round(m.points.mean(axis=1) / 5).astype(int)) <= {0, 1}

    def test_subsample(self):
        d = make_double_circle(n_points=100, seed=0)
        s = d.subsample(10, seed=1)
        assert len(s) == 10 and s is not d
        assert d.subsample(200) is d


class TestCsv:
    def test_round_trip_exact(self, tmp_path):
        d = make_double_circle(n_points=50, seed=4)
        save_points_csv(tmp_path / "p.csv", d)
        assert np.array_equal(load_points_csv(tmp_path / "p.csv").points, d.points)
        assert (tmp_path / "p.csv").read_text().startswith("x,y\n")
