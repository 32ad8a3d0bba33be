import unittest
from tempfile import TemporaryDirectory

import numpy as np

from calibrate import calibrate, load_calibrated, save_calibrated
from errors import StratificationFailure
from evaluation import auc
from infer import default_mcmc, default_schedule, fit_usbl
from model import build_model_config
from tests.cohorts import toy_dataset

MCMC = default_mcmc(warmup=100, samples=300)


class RecordingFit(object):
    """fit procedure that remembers which participants every fit was trained on"""

    def __init__(self):
        self.calls = []

    def __call__(self, dataset, model_config, seed):
        self.calls.append(set(dataset.participant_ids))
        return fit_usbl(dataset, model_config, default_schedule(steps=20), seed)


class CalibrateTest(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.dataset = toy_dataset(n=14, signal=0.7, seed=1)
        cls.train = cls.dataset.subset(cls.dataset.participant_ids[:10])
        cls.test = cls.dataset.subset(cls.dataset.participant_ids[10:])
        cls.config = build_model_config(cls.dataset, ["fau"])
        cls.fit = RecordingFit()
        cls.model = calibrate(cls.train, cls.config, cls.fit, seed=5, n_folds=5, mcmc=MCMC)

    def test_held_out_logits_never_see_their_session(self):
        nested_calls = self.fit.calls[:5]
        self.assertEqual(len(self.fit.calls), 6)
        held_out_ids = [pid for pid, _, _ in self.model.held_out]
        self.assertEqual(sorted(held_out_ids), sorted(self.train.participant_ids))
        for trained_on in nested_calls:
            held_out_here = set(self.train.participant_ids) - trained_on
            self.assertEqual(len(held_out_here), 2)
            self.assertFalse(held_out_here & trained_on)
        self.assertEqual(self.fit.calls[-1], set(self.train.participant_ids))
        for trained_on in self.fit.calls:
            self.assertFalse(trained_on & set(self.test.participant_ids))

    def test_omega_point_is_posterior_median(self):
        self.assertEqual(self.model.omega_samples.shape, (300,))
        self.assertAlmostEqual(self.model.omega_point, float(np.median(self.model.omega_samples)))
        self.assertEqual(self.model.base.params.omega, self.model.omega_point)
        self.assertTrue(np.all(self.model.omega_samples > 0))

    def test_rank_and_threshold_invariance(self):
        raw = np.array([self.model.predict(s, omega=1.0) for s in self.test.sessions])
        calibrated = np.array([self.model.predict(s) for s in self.test.sessions])
        labels = self.test.labels
        self.assertAlmostEqual(auc(raw, labels), auc(calibrated, labels))
        np.testing.assert_array_equal(raw >= 0.5, calibrated >= 0.5)
        np.testing.assert_array_equal(np.argsort(raw), np.argsort(calibrated))

    def test_deterministic(self):
        again = calibrate(self.train, self.config, RecordingFit(), seed=5, n_folds=5, mcmc=MCMC)
        np.testing.assert_array_equal(again.omega_samples, self.model.omega_samples)
        self.assertEqual(again.held_out, self.model.held_out)

    def test_save_load(self):
        with TemporaryDirectory() as d:
            save_calibrated(self.model, d)
            loaded = load_calibrated(d)
        np.testing.assert_allclose(loaded.omega_samples, self.model.omega_samples, rtol=1e-6)
        self.assertEqual([h[0] for h in loaded.held_out], [h[0] for h in self.model.held_out])
        for s in self.test.sessions:
            self.assertAlmostEqual(loaded.predict(s, omega=1.0), self.model.predict(s, omega=1.0), delta=1e-5)


class CalibrationInputTest(unittest.TestCase):

    def test_one_class(self):
        dataset = toy_dataset(n=10)
        one_class = dataset.replace_sessions([s.with_label(1) for s in dataset.sessions])
        cfg = build_model_config(dataset, ["fau"])
        with self.assertRaises(StratificationFailure):
            calibrate(one_class, cfg, RecordingFit(), n_folds=5, mcmc=MCMC)

    def test_too_few_participants(self):
        dataset = toy_dataset(n=4)
        cfg = build_model_config(dataset, ["fau"])
        with self.assertRaises(StratificationFailure):
            calibrate(dataset, cfg, RecordingFit(), n_folds=5, mcmc=MCMC)
