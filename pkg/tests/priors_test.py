import unittest

import numpy as np
import pytest
from scipy import integrate, stats

from errors import DomainError, ShapeMismatch
from priors import (GRWParams, HorseshoeParams, assemble_horseshoe_weights, grw_covariance, grw_logdensity,
                    half_distribution_logdensity, log_scale_half_logpdf_jnp)


class GRWTest(unittest.TestCase):

    def test_covariance(self):
        expected = np.array([[2.0, 2.0, 2.0], [2.0, 3.0, 3.0], [2.0, 3.0, 4.0]])
        np.testing.assert_allclose(grw_covariance(3, 1.0, 1.0), expected)

    def test_closed_form_unequal_scales(self):
        expected = np.array([[4.25, 4.25, 4.25], [4.25, 8.25, 8.25], [4.25, 8.25, 12.25]])
        np.testing.assert_allclose(grw_covariance(3, 0.5, 2.0), expected)

    def test_no_innovation_is_constant_path(self):
        np.testing.assert_array_equal(grw_covariance(4, 1.0, 0.0), np.ones((4, 4)))

    def test_single_sample(self):
        np.testing.assert_allclose(grw_covariance(1, 0.5, 2.0), [[0.25 + 4.0]])

    def test_empty(self):
        with self.assertRaises(ShapeMismatch):
            grw_covariance(0, 1.0, 1.0)

    def test_density_matches_mvn(self):
        rng = np.random.RandomState(3)
        for _ in range(20):
            K = rng.randint(1, 17)
            s0, si = rng.uniform(0.1, 2.0, size=2)
            row = rng.normal(size=K)
            cov = grw_covariance(K, s0, si)
            expected = stats.multivariate_normal(np.zeros(K), cov).logpdf(row)
            self.assertAlmostEqual(grw_logdensity(row, GRWParams(s0, si)), float(expected), delta=1e-8)

    def test_example_row(self):
        expected = stats.multivariate_normal(np.zeros(3), grw_covariance(3, 1.0, 0.5)).logpdf([1.0, 1.0, 2.0])
        self.assertAlmostEqual(grw_logdensity(np.array([1.0, 1.0, 2.0]), GRWParams(1.0, 0.5)), float(expected),
                               delta=1e-8)

    def test_sampled_paths_have_the_covariance(self):
        rng = np.random.RandomState(4)
        K, s0, si = 4, 1.0, 0.5
        paths = rng.normal(0.0, s0, size=(100000, 1)) + np.cumsum(rng.normal(0.0, si, size=(100000, K)), axis=1)
        np.testing.assert_allclose(np.cov(paths, rowvar=False), grw_covariance(K, s0, si), atol=0.05)

    def test_smooth_rows_are_likelier(self):
        grw = GRWParams(1.0, 0.1)
        self.assertGreater(grw_logdensity(np.full(5, 0.3), grw), grw_logdensity(np.array([0.3, -0.3] * 2 + [0.3]), grw))


class HorseshoeTest(unittest.TestCase):

    def test_assemble(self):
        hs = HorseshoeParams(2.0, np.array([1.0, 0.5]), np.ones((2, 3)))
        np.testing.assert_allclose(assemble_horseshoe_weights(hs), [[2.0] * 3, [1.0] * 3])

    def test_linear_in_raw_weights(self):
        rng = np.random.RandomState(5)
        local = rng.uniform(0.1, 2.0, size=3)
        b1, b2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        combined = assemble_horseshoe_weights(HorseshoeParams(0.7, local, 2.0 * b1 - 3.0 * b2))
        separate = (2.0 * assemble_horseshoe_weights(HorseshoeParams(0.7, local, b1))
                    - 3.0 * assemble_horseshoe_weights(HorseshoeParams(0.7, local, b2)))
        np.testing.assert_allclose(combined, separate, atol=1e-12)

    def test_row_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            assemble_horseshoe_weights(HorseshoeParams(1.0, np.ones(3), np.ones((2, 3))))


@pytest.mark.parametrize("kind, reference", [
    ("half-normal", lambda x, s: stats.halfnorm.logpdf(x, scale=s)),
    ("half-cauchy", lambda x, s: stats.halfcauchy.logpdf(x, scale=s)),
    ("half-student-t", lambda x, s: np.log(2.0) + stats.t.logpdf(x, 3.0, scale=s)),
])
def test_half_densities(kind, reference):
    for x, s in [(0.1, 1.0), (2.0, 0.1), (5.0, 10.0)]:
        assert abs(half_distribution_logdensity(kind, s, x, df=3.0) - reference(x, s)) < 1e-10


@pytest.mark.parametrize("kind", ["half-normal", "half-cauchy", "half-student-t"])
def test_log_scale_density_integrates_to_one(kind):
    u = np.linspace(-30.0, 12.0, 40001)
    density = np.exp(np.asarray(log_scale_half_logpdf_jnp(kind, u, 1.0, 3.0)))
    assert abs(integrate.trapezoid(density, u) - 1.0) < 1e-3


class HalfDomainTest(unittest.TestCase):

    def test_nonpositive_x(self):
        with self.assertRaises(DomainError):
            half_distribution_logdensity("half-normal", 1.0, 0.0)

    def test_nonpositive_scale(self):
        with self.assertRaises(DomainError):
            half_distribution_logdensity("half-cauchy", -1.0, 1.0)

    def test_unknown_kind(self):
        with self.assertRaises(ValueError):
            half_distribution_logdensity("half-laplace", 1.0, 1.0)
