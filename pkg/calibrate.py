"""
Stage-2 confidence calibration. Held-out session logits z_p from a nested participant-level
cross-validation inside the training set are pooled with their labels, and the evidence
scale omega is sampled from y_p ~ Bernoulli(logistic(omega * z_p)) with a HalfCauchy prior.
"""
import os

import numpy as np
from joblib import Parallel, delayed

import config
from errors import StratificationFailure
from evaluation import CVConfig, make_folds
from infer import OmegaPosterior, default_mcmc, default_schedule, fit_usbl, sample_omega
from model import load_model, save_model, session_logit
from tensor_io import read_tensor, write_tensor
from utils import derive_seed, log

NESTED_KEY = 1009
MCMC_KEY = 2003
REFIT_KEY = 3001


class CalibratedModel(object):

    def __init__(self, base, omega_posterior, held_out=None, nested=None):
        self.base = base
        self.omega_posterior = omega_posterior
        self.held_out = held_out or []
        self.nested = nested or []

    @property
    def omega_samples(self):
        return self.omega_posterior.samples

    @property
    def omega_point(self):
        return float(np.median(self.omega_samples))

    def predict(self, session, omega=None):
        """logistic(omega * z); omega defaults to the posterior median."""
        return self.base.predict(session, self.omega_point if omega is None else omega)


def _default_fit_procedure(dataset, model_config, seed):
    return fit_usbl(dataset, model_config, default_schedule(), seed)


def _held_out_logits(train, fold, model_config, fit_procedure, seed):
    nested_train = train.subset(fold.train_ids)
    if len(set(int(y) for y in nested_train.labels)) < 2:
        raise StratificationFailure(f"nested fold {fold.fold}: training split has one class only")
    model = fit_procedure(nested_train, model_config, seed)
    held_out = []
    for pid in fold.test_ids:
        session = train.session(pid)
        held_out.append((pid, session_logit(model, model.prepare(session), omega=1.0), session.label))
    return model, held_out


def calibrate(train, model_config, fit_procedure=None, seed=0, n_folds=None, mcmc=None, jobs=1):
    """
    Nested-CV calibration of a stage-1 model.

    Parameters
    ----------
    train : Dataset
        labeled training sessions
    fit_procedure : callable
        (dataset, model_config, seed) -> FittedModel; defaults to `fit_usbl` with the default schedule

    Returns
    -------
    CalibratedModel whose base model is refit on all of `train`
    """
    fit_procedure = fit_procedure or _default_fit_procedure
    n_folds = n_folds or config.CALIBRATION_FOLDS
    counts = np.bincount(train.labels.astype(int), minlength=2)
    if counts.min() == 0:
        raise StratificationFailure(f"calibration needs both labels, got counts {counts.tolist()}")
    if len(train) < n_folds:
        raise StratificationFailure(f"calibration needs >= {n_folds} participants, got {len(train)}")

    nested_cv = CVConfig(n_folds, 1, derive_seed(seed, NESTED_KEY), True, False)
    folds = make_folds(train.labels_by_participant(), nested_cv)
    results = Parallel(n_jobs=jobs)(
        delayed(_held_out_logits)(train, fold, model_config, fit_procedure, derive_seed(seed, NESTED_KEY, fold.fold))
        for fold in folds)
    nested = [model for model, _ in results]
    held_out = sorted((h for _, fold_held_out in results for h in fold_held_out), key=lambda h: h[0])

    z = np.array([h[1] for h in held_out])
    y = np.array([h[2] for h in held_out], dtype=np.float64)
    mcmc = mcmc or default_mcmc()
    posterior = sample_omega(z, y, config.OMEGA_HALF_CAUCHY_SCALE, mcmc._replace(seed=derive_seed(seed, MCMC_KEY)))
    log(f"calibration: omega median {np.median(posterior.samples):.4f}, "
        f"acceptance {posterior.acceptance_rate:.2f} over {len(z)} held-out sessions")

    base = fit_procedure(train, model_config, derive_seed(seed, REFIT_KEY))
    base.params.omega = float(np.median(posterior.samples))
    return CalibratedModel(base, posterior, held_out, nested)


def save_calibrated(model, directory):
    save_model(model.base, directory, extra={
        "calibrated": True,
        "omega_point": model.omega_point,
        "acceptance_rate": float(model.omega_posterior.acceptance_rate),
        "held_out": [[pid, float(z), int(y)] for pid, z, y in model.held_out],
    })
    path = os.path.join(directory, "omega_samples" + config.TENSOR_SUFFIX)
    write_tensor(path, (len(model.omega_samples),), model.omega_samples)


def load_calibrated(directory):
    base, doc = load_model(directory)
    path = os.path.join(directory, "omega_samples" + config.TENSOR_SUFFIX)
    samples = read_tensor(path)[1].astype(np.float64)
    posterior = OmegaPosterior(samples, doc.get("acceptance_rate", float("nan")), float("nan"), False)
    held_out = [tuple(h) for h in doc.get("held_out", [])]
    return CalibratedModel(base, posterior, held_out)
