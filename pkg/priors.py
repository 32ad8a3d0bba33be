"""
Log-densities of the structured priors: grouped horseshoe, Gaussian random walk (GRW)
over the time axis of a weight row, and the half-distribution hyperpriors.

The `*_jnp` functions are traceable by JAX and used inside the log posterior; the plain
functions validate their inputs and return floats.
"""
from collections import namedtuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy import stats as jstats

import config
from errors import DomainError, NonFiniteError, ShapeMismatch

jax.config.update("jax_enable_x64", True)

LOG2 = float(np.log(2.0))

HorseshoeParams = namedtuple('HorseshoeParams', 'global_scale local_scales raw_weights')
GRWParams = namedtuple('GRWParams', 'intercept_scale innovation_scale')
HyperpriorConfig = namedtuple('HyperpriorConfig', [
    'half_cauchy_scale_global', 'half_cauchy_scale_local', 'half_normal_scale_innovation',
    'half_student_t_df', 'half_student_t_scale', 'alpha_loc', 'alpha_scale', 'omega_half_cauchy_scale',
])

HALF_KINDS = ("half-cauchy", "half-normal", "half-student-t")


def default_hyperpriors(innovation_scale=None):
    return HyperpriorConfig(
        half_cauchy_scale_global=config.HALF_CAUCHY_SCALE_GLOBAL,
        half_cauchy_scale_local=config.HALF_CAUCHY_SCALE_LOCAL,
        half_normal_scale_innovation=innovation_scale or config.HALF_NORMAL_SCALE_INNOVATION,
        half_student_t_df=config.HALF_STUDENT_T_DF,
        half_student_t_scale=config.HALF_STUDENT_T_SCALE,
        alpha_loc=config.ALPHA_PRIOR_LOC,
        alpha_scale=config.ALPHA_PRIOR_SCALE,
        omega_half_cauchy_scale=config.OMEGA_HALF_CAUCHY_SCALE,
    )


def validate_hyperpriors(hyper):
    for name, value in hyper._asdict().items():
        if name in ("alpha_loc",):
            continue
        if not value > 0:
            raise DomainError(f"hyperprior {name} must be positive, got {value}")
    if hyper.half_student_t_df < 1:
        raise DomainError(f"half-student-t df must be >= 1, got {hyper.half_student_t_df}")


def assemble_horseshoe_weights_jnp(global_scale, local_scales, raw_weights):
    return global_scale * local_scales[:, None] * raw_weights


def assemble_horseshoe_weights(hs):
    local = np.asarray(hs.local_scales, dtype=np.float64)
    raw = np.atleast_2d(np.asarray(hs.raw_weights, dtype=np.float64))
    if local.ndim != 1 or local.shape[0] != raw.shape[0]:
        raise ShapeMismatch(f"{local.shape[0]} local scales for {raw.shape[0]} weight rows")
    if not hs.global_scale > 0 or np.any(local <= 0):
        raise DomainError("horseshoe scales must be positive")
    return float(hs.global_scale) * local[:, None] * raw


def grw_covariance(K, intercept_scale, innovation_scale):
    """Sigma_V[i, j] = s0^2 + si^2 * min(i, j) with 1-indexed i, j."""
    if K < 1:
        raise ShapeMismatch(f"GRW needs K >= 1, got {K}")
    idx = np.arange(1, K + 1)
    return intercept_scale ** 2 + innovation_scale ** 2 * np.minimum.outer(idx, idx).astype(np.float64)


def grw_covariance_jnp(K, intercept_scale, innovation_scale):
    idx = jnp.arange(1, K + 1)
    return intercept_scale ** 2 + innovation_scale ** 2 * jnp.minimum(idx[:, None], idx[None, :])


def grw_logdensity_jnp(rows, intercept_scale, innovation_scale):
    """
    Sum of GRW log-densities over the rows of a (..., K) array. The first entry is the
    intercept plus one innovation, N(0, s0^2 + si^2); later entries add N(0, si^2) steps,
    so the density equals the MVN under `grw_covariance`.
    """
    rows = jnp.atleast_2d(rows)
    first_scale = jnp.sqrt(intercept_scale ** 2 + innovation_scale ** 2)
    out = jnp.sum(jstats.norm.logpdf(rows[:, 0], 0.0, first_scale))
    if rows.shape[1] > 1:
        out = out + jnp.sum(jstats.norm.logpdf(jnp.diff(rows, axis=1), 0.0, innovation_scale))
    return out


def grw_logdensity(row, grw):
    row = np.asarray(row, dtype=np.float64)
    if not np.all(np.isfinite(row)):
        raise NonFiniteError("grw", message="GRW row contains non-finite values")
    if not (grw.intercept_scale > 0 and grw.innovation_scale > 0):
        raise DomainError("GRW scales must be positive")
    return float(grw_logdensity_jnp(row[None, :], grw.intercept_scale, grw.innovation_scale))


def half_logpdf_jnp(kind, x, scale, df=None):
    # twice the symmetric density on the positive half-line
    if kind == "half-normal":
        return LOG2 + jstats.norm.logpdf(x, 0.0, scale)
    if kind == "half-cauchy":
        return LOG2 + jstats.cauchy.logpdf(x, 0.0, scale)
    if kind == "half-student-t":
        return LOG2 + jstats.t.logpdf(x, df, 0.0, scale)
    raise ValueError(f"unknown half-distribution {kind!r}")


def half_distribution_logdensity(kind, scale, x, df=None):
    if kind not in HALF_KINDS:
        raise ValueError(f"unknown half-distribution {kind!r}, expected one of {HALF_KINDS}")
    if not scale > 0:
        raise DomainError(f"scale must be positive, got {scale}")
    if kind == "half-student-t" and (df is None or df < 1):
        raise DomainError(f"half-student-t needs df >= 1, got {df}")
    if not x > 0:
        raise DomainError(f"{kind} density is defined on x > 0, got {x}")
    return float(half_logpdf_jnp(kind, float(x), float(scale), df))


def log_scale_half_logpdf_jnp(kind, log_x, scale, df=None):
    """Density of log(x) when x follows a half-distribution: includes the log-Jacobian log_x."""
    return half_logpdf_jnp(kind, jnp.exp(log_x), scale, df) + log_x
