"""
Repeated stratified k-fold evaluation with participant-level folds, classification
metrics, and the resampling-corrected statistics used to summarize fold values:
sigma_corr^2 = (1/(kr) + n2/n1) * sigma^2, Student-t with kr - 1 degrees of freedom.
"""
from collections import namedtuple

import numpy as np
from joblib import Parallel, delayed
from scipy import stats
from sklearn.metrics import roc_curve
from sklearn.model_selection import KFold, StratifiedKFold
from statsmodels.stats.multitest import fdrcorrection

import config
from errors import ConfigError, DataError, StratificationFailure, UndefinedMetric, USBLError
from utils import derive_seed, log

CVConfig = namedtuple('CVConfig', 'k r seed stratified allow_unstratified')
Fold = namedtuple('Fold', 'repeat fold train_ids test_ids')
MetricSet = namedtuple('MetricSet', 'auc sensitivity specificity brier cross_entropy')
TTestResult = namedtuple('TTestResult', 't p df se mean degenerate')
MethodSpec = namedtuple('MethodSpec', 'name modalities mode windows model_options schedule runner')
MethodSpec.__new__.__defaults__ = (("eeg",), "recoded", "short", None, None, None)

SHUFFLE_KEY = 7919


def default_cv(**overrides):
    cv = CVConfig(config.CV_FOLDS, config.CV_REPEATS, config.CV_SEED, config.CV_STRATIFIED, False)
    return cv._replace(**overrides)


class FoldAssignment(object):

    def __init__(self, folds, k, r):
        self.folds = list(folds)
        self.k = k
        self.r = r

    @property
    def n1(self):
        return float(np.mean([len(f.train_ids) for f in self.folds]))

    @property
    def n2(self):
        return float(np.mean([len(f.test_ids) for f in self.folds]))

    def repeat(self, r):
        return [f for f in self.folds if f.repeat == r]

    def __iter__(self):
        return iter(self.folds)

    def __len__(self):
        return len(self.folds)


def make_folds(labels_by_participant, cfg):
    if cfg.k < 2 or cfg.r < 1:
        raise ConfigError(f"need k >= 2 and r >= 1, got k={cfg.k}, r={cfg.r}")
    ids = sorted(labels_by_participant)
    y = np.array([int(labels_by_participant[i]) for i in ids])
    if len(ids) < cfg.k:
        raise DataError(f"{len(ids)} participants cannot fill {cfg.k} folds")
    stratified = cfg.stratified
    counts = np.bincount(y, minlength=2)
    if stratified and counts.min() < cfg.k:
        message = f"class counts {counts.tolist()} are below k={cfg.k}"
        if not cfg.allow_unstratified:
            raise StratificationFailure(message)
        log(f"{message}: falling back to unstratified folds", level="warning")
        stratified = False

    folds = []
    for repeat in range(cfg.r):
        seed = derive_seed(cfg.seed, repeat)
        if stratified:
            splitter = StratifiedKFold(n_splits=cfg.k, shuffle=True, random_state=seed)
        else:
            splitter = KFold(n_splits=cfg.k, shuffle=True, random_state=seed)
        for fold, (train, test) in enumerate(splitter.split(np.zeros((len(ids), 1)), y)):
            folds.append(Fold(repeat, fold, [ids[i] for i in train], [ids[i] for i in test]))
    return FoldAssignment(folds, cfg.k, cfg.r)


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise DataError(f"{scores.size} scores for {labels.size} labels")
    return scores, labels


def auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted 0.5."""
    scores, labels = _check_binary(scores, labels)
    n1 = int(np.sum(labels == 1))
    n0 = int(np.sum(labels == 0))
    if n1 == 0 or n0 == 0:
        raise UndefinedMetric("AUC needs both classes")
    ranks = stats.rankdata(scores)
    return float((np.sum(ranks[labels == 1]) - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def confusion_metrics(scores, labels, threshold=None):
    """(sensitivity, specificity); a metric whose class is absent is NaN."""
    threshold = config.DECISION_THRESHOLD if threshold is None else threshold
    scores, labels = _check_binary(scores, labels)
    predicted = scores >= threshold
    pos, neg = labels == 1, labels == 0
    sensitivity = float(np.mean(predicted[pos])) if pos.any() else float("nan")
    specificity = float(np.mean(~predicted[neg])) if neg.any() else float("nan")
    return sensitivity, specificity


def brier(probs, labels):
    probs, labels = _check_binary(probs, labels)
    return float(np.mean((probs - labels) ** 2))


def cross_entropy(probs, labels):
    probs, labels = _check_binary(probs, labels)
    eps = config.CROSS_ENTROPY_CLAMP
    p = np.clip(probs, eps, 1.0 - eps)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log1p(-p)))


def compute_metrics(probs, labels, threshold=None):
    try:
        a = auc(probs, labels)
    except UndefinedMetric:
        a = float("nan")
    sens, spec = confusion_metrics(probs, labels, threshold)
    return MetricSet(a, sens, spec, brier(probs, labels), cross_entropy(probs, labels))


def roc_points(scores, labels):
    """(threshold, sensitivity, specificity) triples over all distinct thresholds."""
    fpr, tpr, thresholds = roc_curve(np.asarray(labels).astype(int), np.asarray(scores, float),
                                     drop_intermediate=False)
    return [(float(t), float(s), float(1.0 - f)) for t, s, f in zip(thresholds, tpr, fpr)]


def corrected_variance_factor(j, n1, n2):
    return 1.0 / j + n2 / n1


def _present(values):
    values = np.asarray(values, dtype=np.float64)
    return values[np.isfinite(values)]


def corrected_ttest(fold_values, k, r, n1, n2, null_value=0.5):
    """
    Two-sided corrected resampled t-test. Missing (NaN) fold values are dropped and the
    1/(kr) term uses the number of values present.
    """
    values = _present(fold_values)
    j = values.size
    if j < 2:
        return TTestResult(float("nan"), float("nan"), max(j - 1, 0), float("nan"),
                           float(np.mean(values)) if j else float("nan"), True)
    if j != k * r:
        log(f"corrected t-test: {k * r - j} of {k * r} fold values missing", level="warning")
    mean = float(np.mean(values))
    se = float(np.sqrt(corrected_variance_factor(j, n1, n2) * np.var(values, ddof=1)))
    df = j - 1
    if se == 0:
        if mean == null_value:
            return TTestResult(0.0, 1.0, df, 0.0, mean, False)
        return TTestResult(float(np.sign(mean - null_value) * np.inf), 0.0, df, 0.0, mean, True)
    t = (mean - null_value) / se
    return TTestResult(float(t), float(2.0 * stats.t.sf(abs(t), df)), df, se, mean, False)


def corrected_ci(fold_values, k, r, n1, n2, level=None):
    level = config.CI_LEVEL if level is None else level
    values = _present(fold_values)
    j = values.size
    if j < 2:
        return float("nan"), float("nan")
    se = np.sqrt(corrected_variance_factor(j, n1, n2) * np.var(values, ddof=1))
    half = stats.t.ppf(0.5 + level / 2.0, j - 1) * se
    mean = float(np.mean(values))
    return float(mean - half), float(mean + half)


def corrected_paired_ttest(values_a, values_b, k, r, n1, n2):
    """Corrected test on fold-wise differences a - b (pairs with a missing side are dropped)."""
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError("paired test needs fold values of equal length")
    return corrected_ttest(a - b, k, r, n1, n2, null_value=0.0)


def bh_fdr(pvalues, q=None):
    """Benjamini-Hochberg step-up. Returns (rejected flags, adjusted p); NaN p-values stay NaN/False."""
    q = config.FDR_Q if q is None else q
    p = np.asarray(pvalues, dtype=np.float64)
    rejected = np.zeros(p.shape, dtype=bool)
    adjusted = np.full(p.shape, np.nan)
    ok = np.isfinite(p)
    if ok.any():
        rejected[ok], adjusted[ok] = fdrcorrection(p[ok], alpha=q, method='indep')
    return rejected, adjusted


def mdes(sigma_fold, k, r, n1, n2, alpha=None, power=None, null=0.5):
    """Minimal detectable AUC under the corrected variance."""
    alpha = config.MDES_ALPHA if alpha is None else alpha
    power = config.MDES_POWER if power is None else power
    z = stats.norm.ppf(1.0 - alpha / 2.0) + stats.norm.ppf(power)
    return float(null + z * np.sqrt(corrected_variance_factor(k * r, n1, n2) * sigma_fold ** 2))


def shuffle_labels(dataset, seed):
    rng = np.random.RandomState(derive_seed(seed, SHUFFLE_KEY))
    labels = rng.permutation(dataset.labels)
    return dataset.replace_sessions([s.with_label(int(y)) for s, y in zip(dataset.sessions, labels)])


def _predict_usbl(train, test, spec, seed, calibrate_flag, leadfield, calibration=None):
    from calibrate import calibrate
    from infer import default_schedule, fit_usbl
    from model import build_model_config

    options = dict(spec.model_options or {})
    cfg = build_model_config(train, spec.modalities, region_count=leadfield.region_count if leadfield else None,
                             **options)
    schedule = spec.schedule or default_schedule()

    def fit_procedure(dataset, model_config, seed):
        return fit_usbl(dataset, model_config, schedule, seed, leadfield=leadfield)

    if calibrate_flag:
        cal = calibrate(train, cfg, fit_procedure, seed, **(calibration or {}))
        probs = {s.participant_id: cal.predict(s, omega=1.0) for s in test.sessions}
        calibrated = {s.participant_id: cal.predict(s) for s in test.sessions}
        return probs, calibrated, cal.omega_point
    fit = fit_procedure(train, cfg, seed)
    return {s.participant_id: fit.predict(s) for s in test.sessions}, None, None


def _run_unit(dataset, spec, fold, seed, calibrate_flag, leadfield, calibration=None):
    from track import FoldRecord

    train, test = dataset.subset(fold.train_ids), dataset.subset(fold.test_ids)
    labels = test.labels_by_participant()
    calibrated = omega = None
    try:
        if spec.runner is not None:
            probs = spec.runner(train, test, spec, seed)
        elif spec.name == "usbl":
            probs, calibrated, omega = _predict_usbl(train, test, spec, seed, calibrate_flag, leadfield, calibration)
        else:
            from baselines import run_baseline
            probs = run_baseline(train, test, spec.name, spec.mode, spec.modalities, spec.windows, seed)
    except (USBLError, np.linalg.LinAlgError, FloatingPointError) as e:
        log(f"{spec.name} repeat {fold.repeat} fold {fold.fold} failed: {e}", level="warning")
        return FoldRecord.failed(spec, fold, f"{type(e).__name__}: {e}")

    ids = sorted(probs)
    p = np.array([probs[i] for i in ids])
    y = np.array([labels[i] for i in ids])
    cal_metrics = None
    if calibrated is not None:
        cal_metrics = compute_metrics(np.array([calibrated[i] for i in ids]), y)
    predictions = [[i, float(probs[i]), int(labels[i])] + ([float(calibrated[i])] if calibrated else [])
                   for i in ids]
    return FoldRecord(spec.name, list(spec.modalities), spec.mode, fold.repeat, fold.fold, len(fold.train_ids),
                      len(fold.test_ids), compute_metrics(p, y), cal_metrics, omega, predictions, None)


def run_experiment(dataset, method_specs, cv_config=None, calibrate_flag=False, jobs=1, leadfield=None,
                   shuffle=False, calibration=None, print_progress=False):
    """
    Runs every (configuration, repeat, fold) unit and collects a ResultsTable.
    Each unit's seed depends only on (master seed, repeat, fold), so the table is the
    same for any `jobs`.
    """
    from track import ResultsTable

    cv_config = cv_config or default_cv()
    if isinstance(method_specs, MethodSpec):
        method_specs = [method_specs]
    if any(s.label is None for s in dataset.sessions):
        raise DataError("evaluation needs a labeled dataset")
    if shuffle:
        dataset = shuffle_labels(dataset, cv_config.seed)
    assignment = make_folds(dataset.labels_by_participant(), cv_config)
    units = [(spec, fold, derive_seed(cv_config.seed, fold.repeat, fold.fold))
             for spec in method_specs for fold in assignment]
    verbose = 5 if print_progress else 0
    records = Parallel(n_jobs=jobs, verbose=verbose)(
        delayed(_run_unit)(dataset, spec, fold, seed, calibrate_flag, leadfield, calibration) for spec, fold, seed in units)
    return ResultsTable(records, cv_config, assignment.n1, assignment.n2,
                        {"dataset": dataset.name, "calibrated": bool(calibrate_flag), "shuffled": bool(shuffle)})
