"""
Lead field handling and the covariance machinery of the EEG contrast prior.

Sigma_U = Sigma_eps + sum_s gamma_{r(s)}^2 L_s L_s^T   (spatial, region-tied gammas)
Sigma_V = s0^2 11^T + si^2 J J^T                       (temporal, GRW; see priors.py)
W_EEG   = Sigma_X^{-1} A                               (Haufe transform)
"""
import os
from collections import namedtuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy import linalg as jlinalg
from scipy import linalg, sparse
from scipy.spatial import cKDTree

import config
from errors import (DegenerateGeometry, DomainError, InsufficientSamples, NotPositiveDefinite, ShapeMismatch,
                    ZeroRow)
from tensor_io import read_tensor, write_tensor
from utils import cholesky_with_jitter, log

jax.config.update("jax_enable_x64", True)

LOG_2PI = float(np.log(2.0 * np.pi))


class LeadField(namedtuple('LeadField', 'gains positions regions')):
    """
    gains: C x 3S, column triplets per source vertex
    positions: S x 3 vertex coordinates
    regions: length-S region ids in [1..R]
    """

    @property
    def n_channels(self):
        return self.gains.shape[0]

    @property
    def n_sources(self):
        return self.positions.shape[0]

    @property
    def region_count(self):
        return int(np.max(self.regions))

    def source_gains(self):
        """C x S x 3 view of the gains."""
        return self.gains.reshape(self.n_channels, self.n_sources, 3)


CovarianceEstimate = namedtuple('CovarianceEstimate', 'data_cov noise_cov post_cov pre_cov shrinkage')
FactorAnalysis = namedtuple('FactorAnalysis', 'cov loadings psi loglik converged n_iter')


def make_leadfield(gains, positions, regions):
    gains = np.asarray(gains, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    regions = np.rint(np.asarray(regions, dtype=np.float64)).astype(np.int64).reshape(-1)
    S = positions.shape[0]
    if gains.ndim != 2 or gains.shape[1] != 3 * S:
        raise ShapeMismatch(f"gains {gains.shape} do not hold 3 columns for each of {S} vertices")
    if gains.shape[0] < 2 or S < 1:
        raise ShapeMismatch(f"lead field needs C >= 2 and S >= 1, got C={gains.shape[0]}, S={S}")
    if regions.shape[0] != S or regions.min() < 1:
        raise ShapeMismatch("every vertex needs a region id >= 1")
    return LeadField(gains, positions, regions)


def save_leadfield(lf, directory):
    os.makedirs(directory, exist_ok=True)
    write_tensor(os.path.join(directory, "gains" + config.TENSOR_SUFFIX), lf.gains.shape, lf.gains)
    write_tensor(os.path.join(directory, "positions" + config.TENSOR_SUFFIX), lf.positions.shape, lf.positions)
    write_tensor(os.path.join(directory, "regions" + config.TENSOR_SUFFIX), lf.regions.shape, lf.regions)


def load_leadfield(directory):
    parts = [read_tensor(os.path.join(directory, name + config.TENSOR_SUFFIX))[1]
             for name in ("gains", "positions", "regions")]
    return make_leadfield(*parts)


def dataset_leadfield(dataset, kernel_multiplier=None):
    """Preprocessed lead field referenced by the dataset manifest, or None."""
    if dataset.leadfield_path is None:
        return None
    return preprocess_leadfield(load_leadfield(dataset.leadfield_path), kernel_multiplier)


def normalize_rows(gains):
    norms = np.linalg.norm(gains, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroRow(f"lead field row {zero[0]} is all zeros")
    return gains / norms[:, None]


def smoothing_operator(positions, kernel_multiplier):
    """
    Row-normalized Gaussian kernel over vertices (sparse S x S), truncated at
    config.KERNEL_TRUNCATION widths. Width = multiplier x mean nearest-neighbour distance.
    """
    tree = cKDTree(positions)
    d, _ = tree.query(positions, k=2)
    width = kernel_multiplier * float(np.mean(d[:, 1]))
    if width <= 0:
        raise DegenerateGeometry("vertices coincide: smoothing kernel width is 0")
    pairs = tree.query_pairs(config.KERNEL_TRUNCATION * width, output_type='ndarray')
    S = positions.shape[0]
    if len(pairs):
        dist = np.linalg.norm(positions[pairs[:, 0]] - positions[pairs[:, 1]], axis=1)
        w = np.exp(-dist ** 2 / (2.0 * width ** 2))
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        kernel = sparse.coo_matrix((np.concatenate([w, w]), (rows, cols)), shape=(S, S)).tocsr()
    else:
        kernel = sparse.csr_matrix((S, S))
    kernel = kernel + sparse.identity(S, format='csr')
    totals = np.asarray(kernel.sum(axis=1)).ravel()
    return sparse.diags(1.0 / totals) @ kernel


def preprocess_leadfield(lf, kernel_multiplier=None, renormalize=True):
    """
    Normalize each row to unit norm, then smooth every axis component across vertices.
    With renormalize the rows are brought back to unit norm after smoothing.
    """
    m = config.KERNEL_MULTIPLIER if kernel_multiplier is None else kernel_multiplier
    gains = normalize_rows(lf.gains)
    if m == 0 or lf.n_sources < 2:
        return lf._replace(gains=gains)

    op = smoothing_operator(lf.positions, m)
    per_source = gains.reshape(lf.n_channels, lf.n_sources, 3)
    smoothed = np.stack([(op @ per_source[:, :, a].T).T for a in range(3)], axis=2)
    gains = smoothed.reshape(lf.n_channels, 3 * lf.n_sources)
    if renormalize:
        gains = normalize_rows(gains)
    return lf._replace(gains=gains)


def region_outer_products(lf):
    """R x C x C stack of sum_{s in r} L_s L_s^T."""
    per_source = lf.source_gains()
    out = np.zeros((lf.region_count, lf.n_channels, lf.n_channels))
    for r in range(1, lf.region_count + 1):
        g = per_source[:, lf.regions == r, :].reshape(lf.n_channels, -1)
        out[r - 1] = g @ g.T
    return out


def spatial_covariance_jnp(gamma, outer_products, noise_cov):
    return noise_cov + jnp.tensordot(gamma ** 2, outer_products, axes=1)


def build_spatial_covariance(lf, gamma, noise_cov, outer_products=None):
    gamma = np.asarray(gamma, dtype=np.float64)
    noise_cov = np.asarray(noise_cov, dtype=np.float64)
    if gamma.shape != (lf.region_count,):
        raise ShapeMismatch(f"{gamma.shape[0]} gammas for {lf.region_count} regions")
    if noise_cov.shape != (lf.n_channels, lf.n_channels):
        raise ShapeMismatch(f"noise covariance {noise_cov.shape} for {lf.n_channels} channels")
    if outer_products is None:
        outer_products = region_outer_products(lf)
    sigma = noise_cov + np.tensordot(gamma ** 2, outer_products, axes=1)
    return 0.5 * (sigma + sigma.T)


def _fa_loglik(S, cov, n):
    c, lower = linalg.cho_factor(cov, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    trace = np.trace(linalg.cho_solve((c, lower), S))
    return -0.5 * n * (S.shape[0] * LOG_2PI + logdet + trace)


def estimate_noise_covariance(samples, n_factors=None, max_iters=None, tol=None):
    """
    Maximum-likelihood factor analysis by EM: Sigma_eps = diag(psi) + B B^T.

    Parameters
    ----------
    samples : array, N x C
    n_factors : number of interference factors (rank of B)

    Returns
    -------
    FactorAnalysis with the best iterate; `converged` is False when the
    iteration budget ran out.
    """
    n_factors = config.NOISE_FACTORS if n_factors is None else n_factors
    max_iters = max_iters or config.FA_MAX_ITERS
    tol = config.FA_TOL if tol is None else tol
    samples = np.asarray(samples, dtype=np.float64)
    n, C = samples.shape
    if n <= C:
        raise InsufficientSamples(f"factor analysis needs more than {C} samples, got {n}")
    if not 0 <= n_factors < C:
        raise DomainError(f"n_factors must be in [0, {C}), got {n_factors}")

    centered = samples - samples.mean(axis=0)
    S = centered.T @ centered / n
    if n_factors == 0:
        psi = np.diag(S).copy()
        return FactorAnalysis(np.diag(psi), np.zeros((C, 0)), psi, [_fa_loglik(S, np.diag(psi), n)], True, 0)

    floor = 1e-8 * float(np.mean(np.diag(S)))
    evals, evecs = linalg.eigh(S)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    rest = max(float(np.mean(evals[n_factors:])), floor)
    B = evecs[:, :n_factors] * np.sqrt(np.maximum(evals[:n_factors] - rest, floor))
    psi = np.maximum(np.diag(S) - np.sum(B ** 2, axis=1), floor)

    trace = [_fa_loglik(S, B @ B.T + np.diag(psi), n)]
    best = (trace[0], B, psi)
    converged = False
    eye = np.eye(n_factors)
    for it in range(1, max_iters + 1):
        cov = B @ B.T + np.diag(psi)
        beta = linalg.solve(cov, B, assume_a='pos').T          # k x C
        beta_S = beta @ S
        Ezz = eye - beta @ B + beta_S @ beta.T
        B = linalg.solve(Ezz, beta_S, assume_a='pos').T        # C x k
        psi = np.maximum(np.diag(S - B @ beta_S), floor)
        ll = _fa_loglik(S, B @ B.T + np.diag(psi), n)
        trace.append(ll)
        if ll > best[0]:
            best = (ll, B, psi)
        if abs(ll - trace[-2]) <= tol * abs(trace[-2]):
            converged = True
            break

    _, B, psi = best
    if not converged:
        log(f"factor analysis did not converge in {max_iters} iterations", level="warning")
    return FactorAnalysis(B @ B.T + np.diag(psi), B, psi, trace, converged, len(trace) - 1)


def shrink_covariance(cov, shrinkage):
    cov = np.asarray(cov, dtype=np.float64)
    return (1.0 - shrinkage) * cov + shrinkage * np.diag(np.diag(cov))


def estimate_data_covariance(samples, shrinkage=None):
    shrinkage = config.DATA_COV_SHRINKAGE if shrinkage is None else shrinkage
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise InsufficientSamples(f"data covariance needs at least 2 samples, got {samples.shape[0]}")
    return shrink_covariance(np.cov(samples, rowvar=False).reshape(samples.shape[1], samples.shape[1]), shrinkage)


def split_samples(trials, stimulus_index):
    """Pre/post-stimulus time points of T x C x K trials, each as (T*k) x C sample matrices."""
    C = trials.shape[1]
    pre = trials[:, :, :stimulus_index].transpose(0, 2, 1).reshape(-1, C)
    post = trials[:, :, stimulus_index:].transpose(0, 2, 1).reshape(-1, C)
    return pre, post


def estimate_covariances(sessions, shape, n_factors=None, shrinkage=None):
    """Training-split covariance estimates for one EEG modality."""
    shrinkage = config.DATA_COV_SHRINKAGE if shrinkage is None else shrinkage
    n_factors = config.NOISE_FACTORS if n_factors is None else n_factors
    blocks = [split_samples(s.trials[shape.name], shape.stimulus_index) for s in sessions]
    pre = np.concatenate([b[0] for b in blocks], axis=0)
    post = np.concatenate([b[1] for b in blocks], axis=0)
    C = shape.channels
    if pre.shape[0] <= C:
        log(f"{shape.name}: {pre.shape[0]} pre-stimulus samples for {C} channels, "
            f"estimating noise from post-stimulus samples", level="warning")
        pre = post
    if n_factors >= C:
        n_factors = C - 1
    fa = estimate_noise_covariance(pre, n_factors)
    post_cov = np.cov(post, rowvar=False).reshape(C, C)
    pre_cov = np.cov(pre, rowvar=False).reshape(C, C)
    return CovarianceEstimate(shrink_covariance(post_cov, shrinkage), fa.cov, post_cov, pre_cov, shrinkage)


def haufe_weights(data_cov, A):
    data_cov = np.asarray(data_cov, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if A.shape[0] != data_cov.shape[0]:
        raise ShapeMismatch(f"A has {A.shape[0]} rows for a {data_cov.shape[0]}-channel covariance")
    factor, _ = cholesky_with_jitter(data_cov, "data covariance")
    return linalg.cho_solve(factor, A)


def haufe_weights_jnp(data_chol, A):
    """data_chol is the lower Cholesky factor of Sigma_X."""
    return jlinalg.cho_solve((data_chol, True), A)


def matrix_normal_logdensity_jnp(A, chol_u, chol_v):
    C, K = A.shape
    m = jlinalg.solve_triangular(chol_u, A, lower=True)            # C x K
    q = jlinalg.solve_triangular(chol_v, m.T, lower=True)           # K x C
    logdet_u = 2.0 * jnp.sum(jnp.log(jnp.diag(chol_u)))
    logdet_v = 2.0 * jnp.sum(jnp.log(jnp.diag(chol_v)))
    return -0.5 * (C * K * LOG_2PI + K * logdet_u + C * logdet_v + jnp.sum(q ** 2))


def lower_cholesky(matrix, what):
    factor, _ = cholesky_with_jitter(matrix, what)
    return np.tril(factor[0])


def matrix_normal_logdensity(A, sigma_u, sigma_v):
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    sigma_u = np.atleast_2d(np.asarray(sigma_u, dtype=np.float64))
    sigma_v = np.atleast_2d(np.asarray(sigma_v, dtype=np.float64))
    if sigma_u.shape != (A.shape[0],) * 2 or sigma_v.shape != (A.shape[1],) * 2:
        raise ShapeMismatch(f"A {A.shape} vs Sigma_U {sigma_u.shape}, Sigma_V {sigma_v.shape}")
    value = float(matrix_normal_logdensity_jnp(A, lower_cholesky(sigma_u, "Sigma_U"),
                                               lower_cholesky(sigma_v, "Sigma_V")))
    if not np.isfinite(value):
        raise NotPositiveDefinite("matrix-normal covariance factors are degenerate")
    return value
