"""
Reference decoders: the D-score, the recoding trick, window-mean features, shrinkage LDA
with the Ledoit-Wolf intensity and l2-regularized logistic regression.

Trial-level classifiers are turned into session probabilities by averaging clamped trial
logits and mapping the mean through the logistic function. In recoded mode a classifier
predicts congruency (label 1 iff the trial's pairing agrees with y) and the trial logit is
negated on incongruent trials before averaging.
"""
from collections import namedtuple

import numpy as np
from scipy import linalg
from sklearn.covariance import ledoit_wolf as sklearn_ledoit_wolf
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedGroupKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

import config
from errors import (ConfigError, DegenerateRT, InsufficientSamples, MissingCondition, ModalityMismatch,
                    OneConditionOnly, StratificationFailure, WindowOutOfRange)
from tensor_io import Condition, fit_standardizers, standardize_dataset
from utils import cholesky_with_jitter, clamped_logit, log, sigmoid

DScoreResult = namedtuple('DScoreResult', 'mean_incongruent mean_congruent pooled_sd d n_trials')
WindowSet = namedtuple('WindowSet', 'windows kind')
LinearModel = namedtuple('LinearModel', 'weights bias shrinkage regularization')
LinearModel.__doc__ = "Trial scorer score = w'x + b, read as a logit. sLDA fills `shrinkage`, ridge `regularization`."

METHODS = ("slda", "ridge", "dscore")
MODES = ("recoded", "direct")


def window_set(kind):
    if kind == "short":
        return WindowSet(config.SHORT_WINDOWS, "short")
    if kind == "long":
        return WindowSet(config.LONG_WINDOWS, "long")
    raise ConfigError(f"unknown window set {kind!r}, expected 'short' or 'long'")


def _conditions(conditions):
    try:
        return [Condition(c) for c in conditions]
    except ValueError:
        raise MissingCondition(f"condition sequence {list(conditions)!r} has entries other than 'C'/'I'")


def dscore(rts, conditions, trim=False):
    """D = (mean RT incongruent - mean RT congruent) / SD of all trials (ddof=1)."""
    rts = np.asarray(rts, dtype=np.float64)
    conditions = np.array([c.value for c in _conditions(conditions)])
    if rts.shape != conditions.shape:
        raise MissingCondition(f"{rts.size} reaction times for {conditions.size} conditions")
    if trim:
        keep = (rts <= config.RT_TRIM_HIGH) & (rts >= config.RT_TRIM_LOW)
        rts, conditions = rts[keep], conditions[keep]
    incongruent = rts[conditions == "I"]
    congruent = rts[conditions == "C"]
    if incongruent.size == 0 or congruent.size == 0:
        raise OneConditionOnly(f"D-score needs both conditions, got {incongruent.size} I and {congruent.size} C")
    sd = float(np.std(rts, ddof=1))
    if not sd > 0:
        raise DegenerateRT("reaction times have zero spread")
    m_i, m_c = float(np.mean(incongruent)), float(np.mean(congruent))
    return DScoreResult(m_i, m_c, sd, (m_i - m_c) / sd, int(rts.size))


def dscore_classify(d, threshold=0.0):
    return int(d > threshold)


def session_rts(session, modality=None):
    modality = modality or config.RT_MODALITY
    if modality not in session.trials:
        raise ModalityMismatch(f"session {session.participant_id} has no {modality!r} reaction times")
    return session.trials[modality].reshape(session.trial_count, -1)[:, 0]


def recode_labels(label, conditions):
    """Per-trial congruency labels: y on congruent trials, 1 - y on incongruent trials."""
    return np.array([label if c is Condition.CONGRUENT else 1 - label for c in _conditions(conditions)])


def unrecode_predictions(p_congruent, conditions):
    p = np.asarray(p_congruent, dtype=np.float64)
    flip = np.array([c is Condition.INCONGRUENT for c in _conditions(conditions)])
    return np.where(flip, 1.0 - p, p)


def window_features(segment, windows, sample_rate, stimulus_index=0):
    """
    Per-channel means inside each (start_s, end_s) window, both ends inclusive, returned
    channel-major (C x n_windows flattened). A window reaching past either end of the segment
    raises WindowOutOfRange.
    """
    segment = np.asarray(segment, dtype=np.float64)
    n_samples = segment.shape[1]
    features = np.empty((segment.shape[0], len(windows)))
    for j, (start, end) in enumerate(windows):
        if not start < end:
            raise ConfigError(f"window {start}..{end} is empty")
        # small tolerance so boundaries that land on a sample keep it
        lo = int(np.ceil(start * sample_rate - 1e-9)) + stimulus_index
        hi = int(np.floor(end * sample_rate + 1e-9)) + stimulus_index
        if lo < 0 or hi > n_samples - 1 or lo > hi:
            raise WindowOutOfRange(f"window {start}..{end} s covers samples {lo}..{hi}, outside a "
                                   f"{n_samples}-sample segment at {sample_rate} Hz, onset {stimulus_index}")
        features[:, j] = segment[:, lo:hi + 1].mean(axis=1)
    return features.reshape(-1)


def trial_features(session, shapes, windows):
    """T x F feature matrix; single-sample modalities enter with their raw value."""
    blocks = []
    for shape in shapes:
        if shape.name not in session.trials:
            raise ModalityMismatch(f"session {session.participant_id} has no {shape.name!r} segments")
        x = session.trials[shape.name]
        if shape.samples == 1:
            blocks.append(x.reshape(x.shape[0], -1))
        else:
            blocks.append(np.stack([window_features(seg, windows, shape.sample_rate, shape.stimulus_index)
                                    for seg in x]))
    return np.concatenate(blocks, axis=1)


def ledoit_wolf(samples, assume_centered=False):
    """
    (Sigma_shrunk, lambda) with Sigma_shrunk = (1 - lambda) S + lambda mu I, mu = tr(S)/C.
    Zero scatter gives lambda = 1 and a zero matrix.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise InsufficientSamples("Ledoit-Wolf needs at least 2 samples")
    centered = samples if assume_centered else samples - samples.mean(axis=0)
    if not np.any(centered):
        return np.zeros((samples.shape[1], samples.shape[1])), 1.0
    cov, shrinkage = sklearn_ledoit_wolf(centered, assume_centered=True)
    return cov, float(np.clip(shrinkage, 0.0, 1.0))


def _check_classes(labels):
    labels = np.asarray(labels).astype(int)
    if len(np.unique(labels)) < 2:
        raise StratificationFailure("classifier needs both classes in its training data")
    return labels


def fit_slda(features, labels, shrinkage=None):
    """
    Shrinkage LDA on class-centered pooled scatter. `shrinkage=None` uses the Ledoit-Wolf
    intensity; a number fixes it (0 gives classical LDA).
    """
    X = np.asarray(features, dtype=np.float64)
    y = _check_classes(labels)
    mu0, mu1 = X[y == 0].mean(axis=0), X[y == 1].mean(axis=0)
    centered = np.where((y == 1)[:, None], X - mu1, X - mu0)
    if shrinkage is None:
        cov, shrinkage = ledoit_wolf(centered, assume_centered=True)
    else:
        scatter = centered.T @ centered / X.shape[0]
        mu = np.trace(scatter) / X.shape[1]
        cov = (1.0 - shrinkage) * scatter + shrinkage * mu * np.eye(X.shape[1])
    factor, _ = cholesky_with_jitter(cov, "sLDA covariance")
    w = linalg.cho_solve(factor, mu1 - mu0)
    return LinearModel(w, float(-w @ (mu1 + mu0) / 2.0), float(shrinkage), None)


def predict_linear(model, features):
    return np.asarray(features, dtype=np.float64) @ model.weights + model.bias


predict_slda = predict_linear


def _ridge_pipeline(c, seed):
    return make_pipeline(StandardScaler(),
                         LogisticRegression(C=c, max_iter=config.RIDGE_MAX_ITER, random_state=seed))


def _as_linear(pipeline, c):
    scaler, lr = pipeline.steps[0][1], pipeline.steps[1][1]
    w = lr.coef_[0] / scaler.scale_
    return LinearModel(w, float(lr.intercept_[0] - w @ scaler.mean_), None, float(c))


def fit_ridge_lr(features, labels, grid=None, nested_folds=None, groups=None, seed=0):
    """
    l2 logistic regression with the inverse regularization C picked from `grid` by nested
    CV log-likelihood, then refit on all data. `groups` keeps a session's trials in one fold.
    """
    grid = tuple(grid or config.RIDGE_GRID)
    if not grid:
        raise ConfigError("ridge grid is empty")
    nested_folds = nested_folds or config.RIDGE_NESTED_FOLDS
    X = np.asarray(features, dtype=np.float64)
    y = _check_classes(labels)
    groups = np.arange(len(y)) if groups is None else np.asarray(groups)

    best = grid[0]
    if len(grid) > 1:
        splitter = StratifiedGroupKFold(n_splits=nested_folds, shuffle=True, random_state=seed)
        splits = list(splitter.split(X, y, groups))
        scores = []
        for c in grid:
            ll = 0.0
            for train, test in splits:
                if len(np.unique(y[train])) < 2:
                    raise StratificationFailure("nested ridge split holds one class only")
                p = _ridge_pipeline(c, seed).fit(X[train], y[train]).predict_proba(X[test])[:, 1]
                p = np.clip(p, config.CROSS_ENTROPY_CLAMP, 1.0 - config.CROSS_ENTROPY_CLAMP)
                ll += float(np.sum(y[test] * np.log(p) + (1 - y[test]) * np.log1p(-p)))
            scores.append(ll)
        best = grid[int(np.argmax(scores))]
    return _as_linear(_ridge_pipeline(best, seed).fit(X, y), best)


def session_probability_from_trial_logits(trial_logits, conditions, mode="recoded"):
    logits = np.clip(np.asarray(trial_logits, dtype=np.float64), -config.LOGIT_CLAMP, config.LOGIT_CLAMP)
    if mode == "recoded":
        # logit(1 - p) = -logit(p)
        flip = np.array([c is Condition.INCONGRUENT for c in _conditions(conditions)])
        logits = np.where(flip, -logits, logits)
    return float(sigmoid(np.mean(logits)))


def session_probability_from_trial_probs(p, conditions, mode="recoded"):
    return session_probability_from_trial_logits(clamped_logit(p), conditions, mode)


def _training_matrix(sessions, shapes, windows, mode):
    X, y, groups = [], [], []
    for g, s in enumerate(sessions):
        X.append(trial_features(s, shapes, windows))
        y.append(recode_labels(s.label, s.conditions) if mode == "recoded" else np.full(s.trial_count, s.label))
        groups.append(np.full(s.trial_count, g))
    return np.concatenate(X), np.concatenate(y), np.concatenate(groups)


def run_baseline(train, test, method, mode="recoded", modalities=None, windows="short", seed=0, trim=False):
    """Fits `method` on the train split only; returns {participant_id: probability} for test."""
    if method not in METHODS:
        raise ConfigError(f"unknown baseline {method!r}, expected one of {METHODS}")
    if mode not in MODES:
        raise ConfigError(f"unknown decoding mode {mode!r}, expected one of {MODES}")

    if method == "dscore":
        # D-scores need no training; sigmoid keeps the threshold at D = 0
        return {s.participant_id: float(sigmoid(dscore(session_rts(s), s.conditions, trim).d))
                for s in test.sessions}

    names = modalities or [m.name for m in train.modalities]
    shapes = [train.modality(m) for m in names]
    # same train-only channel standardization as the USBL fit
    standardizers = fit_standardizers(train.sessions, names)
    train, test = standardize_dataset(standardizers, train), standardize_dataset(standardizers, test)
    window_list = window_set(windows).windows if isinstance(windows, str) else tuple(windows)
    X, y, groups = _training_matrix(train.sessions, shapes, window_list, mode)
    if method == "slda":
        model = fit_slda(X, y)
    else:
        model = fit_ridge_lr(X, y, groups=groups, seed=seed)
    log(f"{method}/{mode}: {X.shape[0]} trials x {X.shape[1]} features")

    return {s.participant_id: session_probability_from_trial_logits(
        predict_linear(model, trial_features(s, shapes, window_list)), s.conditions, mode)
        for s in test.sessions}
