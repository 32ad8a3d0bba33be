"""
Fitting: Adam with global-norm clipping and an exponentially decayed learning rate,
diagonal Laplace curvature at the mode, and the adaptive random-walk Metropolis
sampler for the session-evidence scale omega.
"""
from collections import namedtuple

import numpy as np
from scipy import integrate
from scipy.special import log_expit
from scipy.stats import halfcauchy
from tqdm import tqdm

import config
from errors import ConfigError, NonFiniteError
from leadfield import estimate_covariances
from model import (FittedModel, Objective, build_batch, build_context, initial_parameters, parameter_layout)
from tensor_io import apply_standardizers, fit_standardizers
from utils import log

OptimizerSchedule = namedtuple('OptimizerSchedule', 'lr_start lr_end steps grad_clip_norm beta1 beta2 epsilon seed')
MCMCConfig = namedtuple('MCMCConfig', 'warmup samples target_acceptance initial_step seed')
AdamState = namedtuple('AdamState', 'step m v')
FitResult = namedtuple('FitResult', 'vector trace steps')
PosteriorApprox = namedtuple('PosteriorApprox', 'mode curvature flags')
OmegaPosterior = namedtuple('OmegaPosterior', 'samples acceptance_rate step_size degenerate')
QuadraturePosterior = namedtuple('QuadraturePosterior', 'omega density mean median')


def default_schedule(**overrides):
    schedule = OptimizerSchedule(config.LR_START, config.LR_END, config.STEPS, config.GRAD_CLIP_NORM,
                                 config.ADAM_BETA1, config.ADAM_BETA2, config.ADAM_EPSILON, 0)
    schedule = schedule._replace(**overrides)
    validate_schedule(schedule)
    return schedule


def validate_schedule(schedule):
    if not 0 < schedule.lr_end <= schedule.lr_start:
        raise ConfigError(f"need 0 < lr_end <= lr_start, got {schedule.lr_end}, {schedule.lr_start}")
    if schedule.steps < 1:
        raise ConfigError(f"steps must be >= 1, got {schedule.steps}")
    if not schedule.grad_clip_norm > 0:
        raise ConfigError(f"gradient clip must be positive, got {schedule.grad_clip_norm}")


def default_mcmc(**overrides):
    cfg = MCMCConfig(config.MCMC_WARMUP, config.MCMC_SAMPLES, config.MCMC_TARGET_ACCEPTANCE,
                     config.MCMC_INITIAL_STEP, 0)._replace(**overrides)
    if cfg.warmup < 1 or cfg.samples < 1:
        raise ConfigError(f"warmup and samples must be >= 1, got {cfg.warmup}, {cfg.samples}")
    return cfg


def lr_at(step, schedule):
    if not 0 <= step <= schedule.steps:
        raise ValueError(f"step {step} outside [0, {schedule.steps}]")
    return schedule.lr_start * (schedule.lr_end / schedule.lr_start) ** (step / schedule.steps)


def clip_by_global_norm(grad, max_norm):
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


def adam_step(x, grad, state, lr, beta1, beta2, epsilon):
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad ** 2
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return x - lr * m_hat / (np.sqrt(v_hat) + epsilon), AdamState(t, m, v)


def fit_map(objective, init, schedule, monitors=(), print_progress=False):
    """
    Minimizes `objective` with exactly `schedule.steps` Adam updates.

    Parameters
    ----------
    objective : callable
        vector -> (value, gradient) of the function to minimize
    init : array
        starting vector

    Returns
    -------
    FitResult with the final iterate and the objective trace (steps + 1 values)
    """
    x = np.array(init, dtype=np.float64)
    value, grad = objective(x)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteError("objective", step=0)
    state = AdamState(0, np.zeros_like(x), np.zeros_like(x))
    trace = [value]
    for i in tqdm(range(schedule.steps), disable=not print_progress, desc="fit"):
        lr = lr_at(i, schedule)
        clipped, norm = clip_by_global_norm(grad, schedule.grad_clip_norm)
        x, state = adam_step(x, clipped, state, lr, schedule.beta1, schedule.beta2, schedule.epsilon)
        value, grad = objective(x)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            error = NonFiniteError("objective", step=i + 1)
            error.vector = x
            raise error
        trace.append(value)
        for monitor in monitors:
            monitor.run(i + 1, {'objective': value, 'grad_norm': norm, 'lr': lr})
    return FitResult(x, np.array(trace), schedule.steps)


def laplace_diag(objective, mode, rel_step=None, floor=None):
    """
    Per-coordinate second derivatives of `objective` (the negative log posterior)
    by central differences. Non-finite or sub-floor entries are flagged and floored.
    """
    rel_step = rel_step or config.LAPLACE_REL_STEP
    floor = config.CURVATURE_FLOOR if floor is None else floor
    mode = np.asarray(mode, dtype=np.float64)
    f0 = objective(mode)
    curvature = np.empty_like(mode)
    for i in range(mode.size):
        h = rel_step * max(abs(mode[i]), 1.0)
        e = np.zeros_like(mode)
        e[i] = h
        curvature[i] = (objective(mode + e) - 2.0 * f0 + objective(mode - e)) / h ** 2
    flags = ~np.isfinite(curvature) | (curvature < floor)
    if flags.any():
        log(f"laplace: {int(flags.sum())} curvature entries flagged and floored", level="warning")
    curvature = np.where(flags, floor, curvature)
    return PosteriorApprox(mode, curvature, flags)


def omega_log_posterior(log_omega, z, y, prior_scale):
    """Log density of u = log(omega); vectorized over `log_omega`."""
    u = np.atleast_1d(np.asarray(log_omega, dtype=np.float64))
    omega = np.exp(u)
    logits = omega[:, None] * z[None, :]
    ll = np.sum(y * log_expit(logits) + (1.0 - y) * log_expit(-logits), axis=1)
    prior = halfcauchy.logpdf(omega, scale=prior_scale)
    return ll + prior + u


def sample_omega(z, y, prior_scale=None, cfg=None):
    """
    Adaptive random-walk Metropolis on log(omega) for y_p ~ Bernoulli(logistic(omega z_p)).
    The proposal scale adapts toward the target acceptance during warmup only.
    """
    prior_scale = prior_scale or config.OMEGA_HALF_CAUCHY_SCALE
    cfg = cfg or default_mcmc()
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.size == 0 or z.shape != y.shape:
        raise ConfigError("omega sampling needs matching, non-empty z and y")
    degenerate = bool(np.all(z == 0))
    if degenerate:
        log("all held-out logits are 0: omega posterior equals its prior", level="warning")

    rng = np.random.RandomState(cfg.seed)
    u = 0.0
    lp = float(omega_log_posterior(u, z, y, prior_scale)[0])
    log_step = np.log(cfg.initial_step)
    samples = np.empty(cfg.samples)
    accepted = 0
    for i in range(cfg.warmup + cfg.samples):
        proposal = u + np.exp(log_step) * rng.normal()
        lp_prop = float(omega_log_posterior(proposal, z, y, prior_scale)[0])
        accept = np.log(rng.uniform()) < lp_prop - lp
        if accept:
            u, lp = proposal, lp_prop
        if i < cfg.warmup:
            log_step += (float(accept) - cfg.target_acceptance) / np.sqrt(i + 1.0)
        else:
            samples[i - cfg.warmup] = np.exp(u)
            accepted += int(accept)
    return OmegaPosterior(samples, accepted / cfg.samples, float(np.exp(log_step)), degenerate)


def omega_posterior_quadrature(z, y, prior_scale=None, lo=-12.0, hi=12.0, n=4001):
    """Deterministic 1-D reference for sample_omega on a log(omega) grid."""
    prior_scale = prior_scale or config.OMEGA_HALF_CAUCHY_SCALE
    u = np.linspace(lo, hi, n)
    lp = omega_log_posterior(u, np.asarray(z, float), np.asarray(y, float), prior_scale)
    density = np.exp(lp - lp.max())
    density /= integrate.trapezoid(density, u)
    cdf = integrate.cumulative_trapezoid(density, u, initial=0.0)
    omega = np.exp(u)
    mean = float(integrate.trapezoid(omega * density, u))
    median = float(np.exp(np.interp(0.5, cdf, u)))
    return QuadraturePosterior(omega, density, mean, median)


def fit_usbl(train, model_config, schedule=None, seed=None, leadfield=None, monitors=(),
             laplace=False, print_progress=False):
    """
    Stage-1 fit on a training dataset: train-only standardization and covariances,
    seeded initialization, fixed-budget MAP, optional diagonal Laplace.
    """
    schedule = schedule or default_schedule()
    seed = schedule.seed if seed is None else seed
    names = [s.name for s in model_config.modalities]
    standardizers = fit_standardizers(train.sessions, names)
    sessions = [apply_standardizers(standardizers, s) for s in train.sessions]

    covariances = {}
    for spec in model_config.modalities:
        if spec.prior == "eeg-dugh":
            covariances[spec.name] = estimate_covariances(sessions, train.modality(spec.name))
    context = build_context(model_config, covariances, leadfield)

    layout = parameter_layout(model_config)
    init = initial_parameters(layout, seed)
    objective = Objective(layout, model_config, build_batch(sessions, model_config, context))
    try:
        fit = fit_map(objective.negative_value_and_grad, init.vector, schedule, monitors, print_progress)
    except NonFiniteError as e:
        vector = getattr(e, "vector", init.vector)
        bad = [k for k, v in objective.terms(vector).items() if not np.isfinite(v)]
        raise NonFiniteError(bad[0] if bad else "gradient", step=e.step)

    curvature = flags = None
    if laplace:
        approx = laplace_diag(objective.negative_value, fit.vector)
        curvature, flags = approx.curvature, approx.flags
    return FittedModel(model_config, init.with_vector(fit.vector), context, standardizers, covariances,
                       curvature, flags, list(fit.trace))
