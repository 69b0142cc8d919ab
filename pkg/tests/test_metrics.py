import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adasde.metrics import (
    ContractionQuery,
    DensityGrid,
    contraction_lambda,
    convolve_grid,
    exact_w1_small,
    gaussian_tail_q,
    sliced_w1,
    tv_grid,
    w1_1d,
)


def brute_w1(a, b):
    n = len(a)
    cost = np.linalg.norm(a[:, None] - b[None], axis=-1)
    return min(cost[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))


def q_oracle(r):
    mpmath.mp.dps = 30
    return float(mpmath.quad(lambda a: mpmath.exp(-a * a / 2), [r, mpmath.inf]) / mpmath.sqrt(2 * mpmath.pi))


def random_grid(rng, n=24):
    m = rng.random((n, n)) ** 3
    return DensityGrid.normalized((0.0, 0.0), 1.0 / n, m)


class TestW1:
    def test_1d_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            a, b = rng.normal(size=8), rng.normal(size=8)
            brute = min(np.abs(a - b[list(p)]).mean() for p in itertools.permutations(range(8)))
            assert math.isclose(w1_1d(a, b), brute, rel_tol=1e-12)

    def test_1d_shift(self):
        a = np.random.default_rng(1).normal(size=100)
        assert math.isclose(w1_1d(a, a + 0.3), 0.3, rel_tol=1e-12)

    def test_1d_errors(self):
        with pytest.raises(ValueError):
            w1_1d([], [])
        with pytest.raises(ValueError):
            w1_1d([1.0], [1.0, 2.0])

    @pytest.mark.parametrize("n", [2, 4, 6])
    def test_exact_matches_brute_force(self, n):
        rng = np.random.default_rng(n)
        for _ in range(4):
            a, b = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
            assert math.isclose(exact_w1_small(a, b), brute_w1(a, b), rel_tol=1e-12)

    def test_exact_permutation_invariant(self):
        a = np.random.default_rng(2).normal(size=(50, 2))
        assert exact_w1_small(a, a[::-1]) == 0.0

    def test_exact_errors(self):
        with pytest.raises(ValueError):
            exact_w1_small(np.zeros((3, 2)), np.zeros((4, 2)))
        with pytest.raises(ValueError):
            exact_w1_small(np.zeros((3000, 2)), np.zeros((3000, 2)))

    def test_sliced_translation(self):
        # Mean |<v, theta>| over uniform directions is 2|v|/pi.
        a = np.random.default_rng(3).normal(size=(500, 2))
        v = np.array([0.3, -0.4])
        assert math.isclose(sliced_w1(a, a + v, n_proj=4096), 2 * 0.5 / math.pi, rel_tol=0.01)

    def test_sliced_below_exact(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            n = int(rng.integers(2, 40))
            a, b = rng.normal(size=(n, 2)), rng.normal(size=(n, 2)) + rng.normal(size=2)
            assert sliced_w1(a, b) <= exact_w1_small(a, b) + 1e-9

    def test_sliced_equalizes_sizes(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(300, 2)), rng.normal(size=(200, 2))
        assert sliced_w1(a, b, seed=1) == sliced_w1(a, b, seed=1)
        assert sliced_w1(a, b) >= 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_metric_axioms(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(12, 2)), rng.normal(size=(12, 2))
        assert sliced_w1(a, a) == 0.0
        assert math.isclose(sliced_w1(a, b), sliced_w1(b, a), rel_tol=1e-12)
        assert math.isclose(exact_w1_small(a, b), exact_w1_small(b, a), rel_tol=1e-12)
        assert exact_w1_small(a, b) > 0


class TestGrids:
    def test_tv_identity_and_disjoint(self):
        m1 = np.zeros((4, 4))
        m1[0, 0] = 1
        m2 = np.zeros((4, 4))
        m2[3, 3] = 1
        p, q = DensityGrid((0, 0), 1.0, m1), DensityGrid((0, 0), 1.0, m2)
        assert tv_grid(p, p) == 0.0
        assert tv_grid(p, q) == 1.0

    def test_geometry_mismatch(self):
        p = DensityGrid.normalized((0, 0), 1.0, np.ones((4, 4)))
        q = DensityGrid.normalized((0, 0), 0.5, np.ones((4, 4)))
        with pytest.raises(ValueError):
            tv_grid(p, q)

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            DensityGrid((0, 0), 1.0, np.ones((2, 2)))

    @pytest.mark.parametrize("mu", [0.5, 1.0, 2.0])
    def test_gaussian_tv_matches_closed_form(self, mu):
        def gauss(shift):
            return lambda x: np.exp(-0.5 * ((x[:, 0] - shift) ** 2 + x[:, 1] ** 2))

        p = DensityGrid.from_density(gauss(0.0), lo=-8, hi=8, n=800)
        q = DensityGrid.from_density(gauss(mu), lo=-8, hi=8, n=800)
        assert abs(tv_grid(p, q) - (1 - 2 * gaussian_tail_q(mu / 2))) < 1e-3

    def test_from_points(self):
        g = DensityGrid.from_points(np.array([[0.0, 0.0], [0.0, 0.0], [10.0, 10.0]]), n=4)
        assert g.masses.sum() == pytest.approx(1.0)
        assert g.masses.max() == 1.0

    def test_convolve_identity_at_zero(self):
        p = random_grid(np.random.default_rng(0))
        assert convolve_grid(p, 0.0) is p

    def test_convolve_delta_is_gaussian(self):
        m = np.zeros((41, 41))
        m[20, 20] = 1.0
        p = DensityGrid((0, 0), 1.0, m)
        out = convolve_grid(p, 2.0).masses
        k = np.exp(-0.5 * (np.arange(-8, 9) / 2.0) ** 2)
        k /= k.sum()
        np.testing.assert_allclose(out[12:29, 12:29], np.outer(k, k), atol=1e-15)
        np.testing.assert_allclose(out.sum(), 1.0)

    @pytest.mark.parametrize("sigma", [0.05, 0.1, 0.3])
    def test_tv_contraction(self, sigma):
        rng = np.random.default_rng(int(sigma * 100))
        for _ in range(100):
            p, q = random_grid(rng), random_grid(rng)
            assert tv_grid(convolve_grid(p, sigma), convolve_grid(q, sigma)) <= tv_grid(p, q) + 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 1000), st.floats(0.01, 1.0))
    def test_tv_contraction_property(self, seed, sigma):
        rng = np.random.default_rng(seed)
        p, q = random_grid(rng, 16), random_grid(rng, 16)
        assert tv_grid(convolve_grid(p, sigma), convolve_grid(q, sigma)) <= tv_grid(p, q) + 1e-12


class TestTheory:
    def test_q_values(self):
        assert gaussian_tail_q(0.0) == 0.5
        assert abs(gaussian_tail_q(1.0) - q_oracle(1.0)) < 1e-12
        assert abs(gaussian_tail_q(1.0) - 0.1586552539) < 1e-10

    @pytest.mark.parametrize("r", [0.1, 0.7, 2.5, 6.0])
    def test_q_symmetry_and_oracle(self, r):
        assert abs(gaussian_tail_q(-r) - (1 - gaussian_tail_q(r))) < 1e-15
        assert abs(gaussian_tail_q(r) - q_oracle(r)) < 1e-12

    def test_lambda_example(self):
        # t + (1 + gamma) dt = 1 + 1.1 * 0.5 = 1.55
        lam = contraction_lambda(ContractionQuery(1.0, 1.0, 0.5, 0.1))
        assert math.isclose(lam, 2 * q_oracle(1 / (2 * math.sqrt(1.55**2 - 1))), rel_tol=1e-11)

    def test_lambda_monotone_in_gamma(self):
        vals = [contraction_lambda(ContractionQuery(2.0, 1.0, 0.2, g)) for g in np.linspace(0, 1, 50)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert all(0 <= v < 1 for v in vals)

    def test_lambda_monotone_in_b_and_dt(self):
        lam = lambda b, dt: contraction_lambda(ContractionQuery(b, 1.0, dt, 0.1))
        assert lam(1.0, 0.5) > lam(2.0, 0.5)
        assert lam(1.0, 0.6) > lam(1.0, 0.5)

    def test_unbounded_diameter(self):
        assert contraction_lambda(ContractionQuery(math.inf, 1.0, 0.5, 0.1)) == 0.0

    def test_invalid_queries(self):
        with pytest.raises(ValueError):
            ContractionQuery(1.0, 1.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            ContractionQuery(-1.0, 1.0, 0.5, 0.0)
