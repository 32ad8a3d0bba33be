import unittest

import numpy as np

from errors import ConfigError, NonFiniteError
from infer import (AdamState, adam_step, clip_by_global_norm, default_mcmc, default_schedule, fit_map, fit_usbl,
                   laplace_diag, lr_at, omega_posterior_quadrature, sample_omega)
from model import build_model_config, predict_session
from monitors import TraceMonitor
from tests.cohorts import toy_dataset


def quadratic(center, scales):
    def f(x):
        d = x - center
        return float(0.5 * np.sum(scales * d ** 2)), scales * d
    return f


class ScheduleTest(unittest.TestCase):

    def test_learning_rate_endpoints(self):
        schedule = default_schedule(steps=5000)
        self.assertAlmostEqual(lr_at(0, schedule), 0.01)
        self.assertAlmostEqual(lr_at(5000, schedule), 0.0025)
        self.assertAlmostEqual(lr_at(2500, schedule), 0.005)

    def test_invalid_schedule(self):
        with self.assertRaises(ConfigError):
            default_schedule(steps=0)
        with self.assertRaises(ConfigError):
            default_schedule(lr_start=0.001, lr_end=0.01)

    def test_invalid_mcmc(self):
        with self.assertRaises(ConfigError):
            default_mcmc(samples=0)


class AdamTest(unittest.TestCase):

    def test_clipping(self):
        grad, norm = clip_by_global_norm(np.array([3.0, 4.0]), 1.0)
        self.assertAlmostEqual(norm, 5.0)
        np.testing.assert_allclose(grad, [0.6, 0.8])
        grad, _ = clip_by_global_norm(np.array([0.3, 0.4]), 1.0)
        np.testing.assert_allclose(grad, [0.3, 0.4])

    def test_first_step_moves_by_lr(self):
        x, state = adam_step(np.zeros(2), np.array([2.0, -0.5]), AdamState(0, np.zeros(2), np.zeros(2)),
                             0.1, 0.9, 0.999, 1e-8)
        np.testing.assert_allclose(x, [-0.1, 0.1], rtol=1e-6)
        self.assertEqual(state.step, 1)

    def test_fit_map_minimizes_quadratic(self):
        center = np.array([0.5, -0.3, 0.2])
        schedule = default_schedule(steps=2000, lr_start=0.05, lr_end=0.01)
        fit = fit_map(quadratic(center, np.array([1.0, 2.0, 0.5])), np.zeros(3), schedule)
        self.assertEqual(len(fit.trace), 2001)
        np.testing.assert_allclose(fit.vector, center, atol=2e-2)
        self.assertLess(fit.trace[-1], fit.trace[0])

    def test_monitor_records_every_step(self):
        monitor = TraceMonitor(1)
        fit_map(quadratic(np.ones(2), np.ones(2)), np.zeros(2), default_schedule(steps=7), [monitor])
        self.assertEqual(len(monitor.data), 7)

    def test_non_finite_objective(self):
        def f(x):
            return float("nan"), np.zeros_like(x)
        with self.assertRaises(NonFiniteError) as ctx:
            fit_map(f, np.zeros(2), default_schedule(steps=3))
        self.assertEqual(ctx.exception.step, 0)


class LaplaceTest(unittest.TestCase):

    def test_quadratic_curvature(self):
        scales = np.array([4.0, 0.25, 1.0])
        f = quadratic(np.zeros(3), scales)
        approx = laplace_diag(lambda x: f(x)[0], np.zeros(3))
        np.testing.assert_allclose(approx.curvature, scales, rtol=1e-4)
        self.assertFalse(approx.flags.any())

    def test_flat_direction_is_flagged(self):
        f = quadratic(np.zeros(2), np.array([1.0, 0.0]))
        approx = laplace_diag(lambda x: f(x)[0], np.zeros(2))
        np.testing.assert_array_equal(approx.flags, [False, True])
        self.assertGreater(approx.curvature[1], 0.0)


class OmegaTest(unittest.TestCase):

    def test_sampler_matches_quadrature(self):
        rng = np.random.RandomState(0)
        z = rng.normal(size=40)
        y = (rng.uniform(size=40) < 1.0 / (1.0 + np.exp(-2.0 * z))).astype(float)
        posterior = sample_omega(z, y, 10.0, default_mcmc(warmup=1000, samples=8000, seed=1))
        reference = omega_posterior_quadrature(z, y, 10.0)
        self.assertAlmostEqual(np.median(posterior.samples), reference.median, delta=0.15 * reference.median)
        self.assertGreater(posterior.acceptance_rate, 0.2)
        self.assertLess(posterior.acceptance_rate, 0.7)
        self.assertFalse(posterior.degenerate)

    def test_zero_logits_sample_the_prior(self):
        z = np.zeros(10)
        y = np.array([0.0, 1.0] * 5)
        posterior = sample_omega(z, y, 10.0, default_mcmc(warmup=1000, samples=8000, seed=2))
        self.assertTrue(posterior.degenerate)
        # half-Cauchy(10) median is 10
        self.assertGreater(np.median(posterior.samples), 5.0)
        self.assertLess(np.median(posterior.samples), 20.0)

    def test_sampler_is_seeded(self):
        z = np.linspace(-1, 1, 10)
        y = (z > 0).astype(float)
        a = sample_omega(z, y, cfg=default_mcmc(warmup=50, samples=100, seed=5))
        b = sample_omega(z, y, cfg=default_mcmc(warmup=50, samples=100, seed=5))
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_mismatched_inputs(self):
        with self.assertRaises(ConfigError):
            sample_omega(np.zeros(3), np.zeros(4))


class FitTest(unittest.TestCase):

    def test_fit_is_deterministic(self):
        dataset = toy_dataset(n=8, signal=0.5)
        cfg = build_model_config(dataset, ["fau"])
        schedule = default_schedule(steps=30)
        a = fit_usbl(dataset, cfg, schedule, seed=4)
        b = fit_usbl(dataset, cfg, schedule, seed=4)
        np.testing.assert_array_equal(a.params.vector, b.params.vector)
        self.assertEqual(len(a.trace), 31)

    def test_fit_separates_a_strong_signal(self):
        dataset = toy_dataset(n=12, signal=1.0)
        cfg = build_model_config(dataset, ["fau"])
        model = fit_usbl(dataset, cfg, default_schedule(steps=300, lr_start=0.05, lr_end=0.01), seed=0)
        probs = np.array([predict_session(model, model.prepare(s)) for s in dataset.sessions])
        self.assertGreater(probs[dataset.labels == 1].mean(), probs[dataset.labels == 0].mean())
