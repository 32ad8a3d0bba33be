import itertools
import unittest

import numpy as np
import pytest
from scipy import stats

from errors import ConfigError, DataError, StratificationFailure, UndefinedMetric
from evaluation import (MethodSpec, auc, bh_fdr, brier, compute_metrics, confusion_metrics, corrected_ci,
                        corrected_paired_ttest, corrected_ttest, corrected_variance_factor, cross_entropy, default_cv,
                        make_folds, mdes, run_experiment, shuffle_labels)
from tests.cohorts import toy_dataset


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def oracle_runner(train, test, spec, seed):
    return {s.participant_id: 0.9 if s.label == 1 else 0.1 for s in test.sessions}


def seeded_runner(train, test, spec, seed):
    rng = np.random.RandomState(seed)
    return {pid: float(rng.uniform()) for pid in sorted(test.participant_ids)}


def failing_runner(train, test, spec, seed):
    raise DataError("no usable trials")


class MetricTest(unittest.TestCase):

    def test_auc_matches_brute_force(self):
        rng = np.random.RandomState(0)
        for _ in range(20):
            scores = np.round(rng.uniform(size=15), 1)
            labels = rng.randint(0, 2, size=15)
            if labels.min() == labels.max():
                continue
            self.assertAlmostEqual(auc(scores, labels), brute_force_auc(scores, labels), places=12)

    def test_auc_needs_both_classes(self):
        with self.assertRaises(UndefinedMetric):
            auc([0.1, 0.2], [1, 1])
        self.assertTrue(np.isnan(compute_metrics(np.array([0.1, 0.2]), np.array([1, 1])).auc))

    def test_constant_half(self):
        probs = np.full(6, 0.5)
        labels = np.array([0, 1, 0, 1, 1, 0])
        self.assertAlmostEqual(brier(probs, labels), 0.25)
        self.assertAlmostEqual(cross_entropy(probs, labels), np.log(2.0))
        self.assertAlmostEqual(auc(probs, labels), 0.5)

    def test_confusion(self):
        sens, spec = confusion_metrics([0.9, 0.4, 0.6, 0.2], [1, 1, 0, 0])
        self.assertAlmostEqual(sens, 0.5)
        self.assertAlmostEqual(spec, 0.5)
        sens, spec = confusion_metrics([0.9, 0.4], [1, 1])
        self.assertTrue(np.isnan(spec))

    def test_tie_at_threshold_is_positive(self):
        self.assertEqual(confusion_metrics([0.6, 0.4, 0.5, 0.3], [1, 1, 0, 0]), (0.5, 0.5))

    def test_monotone_transform_invariance(self):
        rng = np.random.RandomState(3)
        transforms = [(np.exp, np.exp), (lambda x: x ** 3 + x, lambda t: t ** 3 + t),
                      (lambda x: np.log(x / (1.0 - x)), lambda t: np.log(t / (1.0 - t)))]
        for _ in range(10):
            scores = np.round(rng.uniform(0.05, 0.95, size=20), 2)
            labels = np.tile([0, 1], 10)
            for f, g in transforms:
                self.assertAlmostEqual(auc(f(scores), labels), auc(scores, labels), places=12)
                self.assertEqual(confusion_metrics(f(scores), labels, threshold=g(0.5)),
                                 confusion_metrics(scores, labels))

    def test_cross_entropy_is_clamped(self):
        self.assertTrue(np.isfinite(cross_entropy([0.0, 1.0], [1, 0])))


class CorrectedStatisticsTest(unittest.TestCase):

    def test_factor_against_naive(self):
        factor = corrected_variance_factor(50, 80.0, 20.0)
        self.assertAlmostEqual(factor, 0.27)
        self.assertAlmostEqual(np.sqrt(factor / (1.0 / 50)), 3.674, places=3)

    def test_ci_half_width(self):
        rng = np.random.RandomState(1)
        values = 0.6 + 0.05 * rng.normal(size=50)
        low, high = corrected_ci(values, 5, 10, 80.0, 20.0)
        sd = np.std(values, ddof=1)
        self.assertAlmostEqual((high - low) / 2.0 / sd, 1.044, places=2)

    def test_ttest_formula(self):
        values = np.array([0.6, 0.7, 0.55, 0.65, 0.62, 0.58])
        result = corrected_ttest(values, 3, 2, 20.0, 10.0)
        se = np.sqrt((1.0 / 6 + 0.5) * np.var(values, ddof=1))
        t = (values.mean() - 0.5) / se
        self.assertAlmostEqual(result.t, t)
        self.assertAlmostEqual(result.p, 2 * stats.t.sf(abs(t), 5))
        self.assertEqual(result.df, 5)

    def test_single_repeat_without_test_share_is_classical(self):
        values = np.random.RandomState(4).uniform(0.4, 0.8, size=8)
        result = corrected_ttest(values, 8, 1, 32.0, 0.0)
        classical = stats.ttest_1samp(values, 0.5)
        self.assertAlmostEqual(result.t, classical.statistic, places=10)
        self.assertAlmostEqual(result.p, classical.pvalue, places=10)

    def test_missing_values_are_dropped(self):
        values = np.array([0.6, np.nan, 0.55, 0.65, 0.62, 0.58])
        result = corrected_ttest(values, 3, 2, 20.0, 10.0)
        self.assertEqual(result.df, 4)

    def test_zero_variance(self):
        at_null = corrected_ttest(np.full(10, 0.5), 5, 2, 40.0, 10.0)
        self.assertEqual((at_null.t, at_null.p), (0.0, 1.0))
        above = corrected_ttest(np.full(10, 0.75), 5, 2, 40.0, 10.0)
        self.assertEqual(above.t, np.inf)
        self.assertEqual(above.p, 0.0)
        self.assertTrue(above.degenerate)

    def test_too_few_values(self):
        result = corrected_ttest([0.6, np.nan], 1, 2, 10.0, 5.0)
        self.assertTrue(result.degenerate)
        self.assertTrue(np.isnan(result.p))

    def test_paired_identical_is_null(self):
        values = np.linspace(0.5, 0.7, 10)
        result = corrected_paired_ttest(values, values, 5, 2, 40.0, 10.0)
        self.assertEqual(result.p, 1.0)

    def test_mdes(self):
        z = stats.norm.ppf(0.975) + stats.norm.ppf(0.8)
        self.assertAlmostEqual(mdes(0.1, 5, 10, 80.0, 20.0), 0.5 + z * np.sqrt(0.27) * 0.1)


@pytest.mark.parametrize("pvalues, rejected, adjusted", [
    ([0.01, 0.04, 0.03, 0.005], [True, True, True, True], [0.02, 0.04, 0.04, 0.02]),
    ([0.2, 0.04, 0.5], [False, False, False], [0.3, 0.12, 0.5]),
    ([0.001, np.nan, 0.9], [True, False, False], [0.002, np.nan, 0.9]),
])
def test_bh_fdr(pvalues, rejected, adjusted):
    r, a = bh_fdr(pvalues, 0.05)
    np.testing.assert_array_equal(r, rejected)
    np.testing.assert_allclose(a, adjusted)


class FoldTest(unittest.TestCase):

    labels = {f"P{i:02d}": i % 2 for i in range(20)}

    def test_deterministic(self):
        a = make_folds(self.labels, default_cv(r=3))
        b = make_folds(dict(reversed(list(self.labels.items()))), default_cv(r=3))
        self.assertEqual([f.test_ids for f in a], [f.test_ids for f in b])

    def test_partition_and_stratification(self):
        assignment = make_folds(self.labels, default_cv(k=5, r=2))
        self.assertEqual(len(assignment), 10)
        for repeat in range(2):
            folds = assignment.repeat(repeat)
            seen = sorted(pid for f in folds for pid in f.test_ids)
            self.assertEqual(seen, sorted(self.labels))
            for f in folds:
                self.assertEqual(sum(self.labels[p] for p in f.test_ids), 2)
                self.assertFalse(set(f.train_ids) & set(f.test_ids))
        self.assertEqual((assignment.n1, assignment.n2), (16.0, 4.0))

    def test_uneven_cohort_fold_sizes(self):
        labels = {f"P{i:02d}": int(i < 19) for i in range(39)}
        for f in make_folds(labels, default_cv(k=5, r=3)):
            self.assertIn(len(f.test_ids), (7, 8))
            self.assertEqual(len(f.train_ids) + len(f.test_ids), 39)

    def test_repeats_differ(self):
        assignment = make_folds(self.labels, default_cv(r=2))
        self.assertNotEqual(assignment.repeat(0)[0].test_ids, assignment.repeat(1)[0].test_ids)

    def test_stratification_failure(self):
        labels = {f"P{i}": int(i < 3) for i in range(12)}
        with self.assertRaises(StratificationFailure):
            make_folds(labels, default_cv(k=5, r=1))
        assignment = make_folds(labels, default_cv(k=5, r=1, allow_unstratified=True))
        self.assertEqual(len(assignment), 5)

    def test_too_few_participants(self):
        with self.assertRaises(DataError):
            make_folds({"a": 0, "b": 1}, default_cv(k=5))

    def test_bad_config(self):
        with self.assertRaises(ConfigError):
            make_folds(self.labels, default_cv(k=1))


class ExperimentTest(unittest.TestCase):

    def test_shuffle_keeps_counts(self):
        dataset = toy_dataset(n=10)
        shuffled = shuffle_labels(dataset, 3)
        self.assertEqual(sorted(shuffled.labels), sorted(dataset.labels))
        np.testing.assert_array_equal(shuffle_labels(dataset, 3).labels, shuffled.labels)

    def test_oracle_runner(self):
        dataset = toy_dataset(n=10)
        table = run_experiment(dataset, MethodSpec("oracle", ("fau",), runner=oracle_runner),
                               default_cv(k=5, r=2))
        self.assertEqual(len(table.records), 10)
        np.testing.assert_array_equal(table.fold_aucs("oracle-recoded/fau"), 1.0)

    def test_failed_units_are_recorded(self):
        dataset = toy_dataset(n=10)
        table = run_experiment(dataset, MethodSpec("broken", ("fau",), runner=failing_runner), default_cv(k=5, r=1))
        self.assertTrue(all(r.error for r in table.records))
        self.assertTrue(np.all(np.isnan(table.fold_aucs("broken-recoded/fau"))))

    def test_jobs_do_not_change_results(self):
        dataset = toy_dataset(n=10)
        spec = MethodSpec("random", ("fau",), runner=seeded_runner)
        a = run_experiment(dataset, spec, default_cv(k=5, r=2), jobs=1)
        b = run_experiment(dataset, spec, default_cv(k=5, r=2), jobs=2)
        self.assertEqual([r.to_dict() for r in a.records], [r.to_dict() for r in b.records])

    def test_needs_labels(self):
        dataset = toy_dataset(n=10)
        unlabeled = dataset.replace_sessions([s.with_label(None) for s in dataset.sessions])
        with self.assertRaises(DataError):
            run_experiment(unlabeled, MethodSpec("oracle", ("fau",), runner=oracle_runner), default_cv(k=5, r=1))
