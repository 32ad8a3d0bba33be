"""
Synthetic cohorts with the task structure the model assumes: blocks alternate congruent and
incongruent pairings, the mean response of a trial is sign(condition) x (2y - 1) x effect x
participant multiplier x a sparse true pattern, a shared per-session random effect makes
trials within a session correlated, and EEG is produced by projecting source activity through
a synthetic lead field. Also holds the Kish design-effect estimator.
"""
import os
from collections import namedtuple

import numpy as np
import yaml
from sklearn.decomposition import PCA

import config
from errors import ConfigError, InsufficientSamples
from leadfield import make_leadfield, preprocess_leadfield, save_leadfield
from tensor_io import Condition, Dataset, ModalityShape, Session, save_dataset, write_tensor
from utils import derive_seed, log

SynthConfig = namedtuple('SynthConfig', [
    'n_participants', 'class_balance', 'blocks', 'trials_per_block', 'modalities', 'effect_size',
    'participant_variability', 'trial_noise_sd', 'session_effect_sd', 'ar_coef', 'sparsity',
    'n_vertices', 'n_regions', 'rt_base_ms', 'rt_scale_ms', 'seed',
])
GroundTruth = namedtuple('GroundTruth', 'patterns true_weights active_sets multipliers labels leadfield raw_leadfield')
DeffEstimate = namedtuple('DeffEstimate', 'deff_per_pc deff n_eff_per_session icc_per_pc n_pcs mean_trials')

SENSOR_RADIUS = 1.2
CAP_MIN_Z = 0.2
LEADFIELD_KEY = 11
LABEL_KEY = 13


def default_synth_config(**overrides):
    cfg = SynthConfig(config.SYNTH_N_PARTICIPANTS, config.SYNTH_CLASS_BALANCE, config.SYNTH_BLOCKS,
                      config.SYNTH_TRIALS_PER_BLOCK, tuple(ModalityShape(*m) for m in config.SYNTH_MODALITIES),
                      config.SYNTH_EFFECT_SIZE, config.SYNTH_PARTICIPANT_VARIABILITY, config.SYNTH_TRIAL_NOISE_SD,
                      config.SYNTH_SESSION_EFFECT_SD, config.SYNTH_AR_COEF, config.SYNTH_SPARSITY,
                      config.SYNTH_N_VERTICES, config.SYNTH_N_REGIONS, config.SYNTH_RT_BASE_MS,
                      config.SYNTH_RT_SCALE_MS, 0)
    cfg = cfg._replace(**overrides)
    return cfg._replace(modalities=tuple(ModalityShape(*m) for m in cfg.modalities))


def validate_synth_config(cfg):
    if cfg.blocks < 2 or cfg.blocks % 2:
        raise ConfigError(f"blocks must be a positive even number, got {cfg.blocks}")
    if cfg.trials_per_block < 1 or cfg.n_participants < 2 or cfg.sparsity < 1:
        raise ConfigError("trials_per_block, sparsity need >= 1 and n_participants >= 2")
    if not 0 < cfg.class_balance < 1:
        raise ConfigError(f"class balance must lie in (0, 1), got {cfg.class_balance}")
    if not -1 < cfg.ar_coef < 1:
        raise ConfigError(f"AR coefficient must lie in (-1, 1), got {cfg.ar_coef}")
    if min(cfg.effect_size, cfg.participant_variability, cfg.trial_noise_sd, cfg.session_effect_sd) < 0:
        raise ConfigError("effect size and noise scales must be >= 0")
    if not cfg.modalities:
        raise ConfigError("synthetic cohort needs at least one modality")
    for m in cfg.modalities:
        if m.channels < 1 or m.samples < 1:
            raise ConfigError(f"modality {m.name} has an empty shape")


def _cap_points(n, radius, rng=None):
    """Points on a spherical cap z >= CAP_MIN_Z: a Fibonacci spiral, or uniform draws given `rng`."""
    if rng is None:
        i = np.arange(n) + 0.5
        z = 1.0 - (1.0 - CAP_MIN_Z) * i / n
        phi = i * np.pi * (3.0 - np.sqrt(5.0))
    else:
        z = rng.uniform(CAP_MIN_Z, 1.0, size=n)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = np.sqrt(1.0 - z ** 2)
    return radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def generate_leadfield(n_channels, n_vertices, n_regions, seed):
    """
    Dipole-like gains from vertices on the unit sphere cap to sensors on a larger cap.
    Regions are contiguous azimuth sectors of equal size. Values pass through float32 so a
    saved and reloaded field is identical.
    """
    if n_vertices < n_regions or n_regions < 1:
        raise ConfigError(f"need 1 <= n_regions <= n_vertices, got {n_regions} regions, {n_vertices} vertices")
    rng = np.random.RandomState(seed)
    sensors = _cap_points(n_channels, SENSOR_RADIUS)
    vertices = _cap_points(n_vertices, 1.0, rng)
    d = sensors[:, None, :] - vertices[None, :, :]
    gains = d / np.linalg.norm(d, axis=2, keepdims=True) ** 3
    regions = np.zeros(n_vertices, dtype=np.int64)
    order = np.argsort(np.arctan2(vertices[:, 1], vertices[:, 0]), kind="stable")
    for r, members in enumerate(np.array_split(order, n_regions)):
        regions[members] = r + 1
    return make_leadfield(gains.reshape(n_channels, 3 * n_vertices).astype(np.float32).astype(np.float64),
                          vertices.astype(np.float32).astype(np.float64), regions)


def condition_sequence(blocks, trials_per_block):
    return [(Condition.CONGRUENT if b % 2 == 0 else Condition.INCONGRUENT).value
            for b in range(blocks) for _ in range(trials_per_block)]


def _time_profile(shape, rng):
    t = (np.arange(shape.samples) - shape.stimulus_index) / shape.sample_rate
    span = max(t[-1], 1.0 / shape.sample_rate)
    center = rng.uniform(0.2, 0.6) * span
    return np.exp(-0.5 * ((t - center) / (0.15 * span + 1e-12)) ** 2)


def _pattern(shape, sparsity, rng, leadfield=None):
    """Unit-Frobenius C x K pattern and the indices of its active channels or sources."""
    if shape.channels == 1 and shape.samples == 1:
        return np.ones((1, 1)), np.zeros(1, dtype=np.int64)
    profile = _time_profile(shape, rng)
    if leadfield is not None:
        active = np.sort(rng.choice(leadfield.n_sources, size=min(sparsity, leadfield.n_sources), replace=False))
        orientation = rng.normal(size=(active.size, 3))
        orientation /= np.linalg.norm(orientation, axis=1, keepdims=True)
        scalp = np.einsum("csa,sa->c", leadfield.source_gains()[:, active, :], orientation)
        pattern = np.outer(scalp, profile)
    else:
        active = np.sort(rng.choice(shape.channels, size=min(sparsity, shape.channels), replace=False))
        pattern = np.zeros((shape.channels, shape.samples))
        pattern[active] = rng.choice([-1.0, 1.0], size=(active.size, 1)) * profile
    return pattern / np.linalg.norm(pattern), active


def _eeg_noise(leadfield, n, samples, rng):
    """Unit-variance channel noise: half projected from white sources, half sensor noise."""
    sources = rng.normal(size=(n, leadfield.gains.shape[1], samples))
    projected = np.einsum("cj,tjk->tck", leadfield.gains, sources)
    return np.sqrt(0.5) * (projected + rng.normal(size=projected.shape))


def _ar1(innovations, coef):
    if coef == 0:
        return innovations
    out = np.empty_like(innovations)
    out[0] = innovations[0]
    scale = np.sqrt(1.0 - coef ** 2)
    for t in range(1, innovations.shape[0]):
        out[t] = coef * out[t - 1] + scale * innovations[t]
    return out


def _true_weights(pattern, shape, leadfield):
    if leadfield is None or shape.name != "eeg":
        return pattern
    # spatial trial-noise covariance of the generator, up to scale
    return np.linalg.solve(leadfield.gains @ leadfield.gains.T + np.eye(shape.channels), pattern)


def generate_cohort(cfg):
    """
    Returns
    -------
    (Dataset, GroundTruth); the ground truth carries the preprocessed lead field when an
    `eeg` modality is generated.
    """
    validate_synth_config(cfg)
    rng = np.random.RandomState(cfg.seed)
    n1 = int(round(cfg.n_participants * cfg.class_balance))
    labels = np.random.RandomState(derive_seed(cfg.seed, LABEL_KEY)).permutation(
        np.r_[np.ones(n1, dtype=int), np.zeros(cfg.n_participants - n1, dtype=int)])

    leadfield = raw = None
    eeg = [m for m in cfg.modalities if m.name == "eeg"]
    if eeg:
        if eeg[0].channels < 2:
            raise ConfigError("synthetic eeg needs at least 2 channels")
        raw = generate_leadfield(eeg[0].channels, cfg.n_vertices, cfg.n_regions, derive_seed(cfg.seed, LEADFIELD_KEY))
        leadfield = preprocess_leadfield(raw)

    patterns, active_sets, weights = {}, {}, {}
    for shape in cfg.modalities:
        lf = leadfield if shape.name == "eeg" else None
        patterns[shape.name], active_sets[shape.name] = _pattern(shape, cfg.sparsity, rng, lf)
        weights[shape.name] = _true_weights(patterns[shape.name], shape, lf)

    conditions = condition_sequence(cfg.blocks, cfg.trials_per_block)
    signs = np.array([Condition(c).sign for c in conditions], dtype=np.float64)
    T = len(conditions)
    multipliers = 1.0 + cfg.participant_variability * rng.normal(size=cfg.n_participants)

    sessions = []
    for p in range(cfg.n_participants):
        amplitude = signs * (2 * labels[p] - 1) * cfg.effect_size * multipliers[p]
        trials = {}
        for shape in cfg.modalities:
            C, K = shape.channels, shape.samples
            if shape.name == "eeg":
                session_effect = _eeg_noise(leadfield, 1, K, rng)[0]
                noise = _eeg_noise(leadfield, T, K, rng)
            else:
                session_effect = rng.normal(size=(C, K))
                noise = rng.normal(size=(T, C, K))
            x = (amplitude[:, None, None] * patterns[shape.name][None]
                 + cfg.session_effect_sd * session_effect[None]
                 + cfg.trial_noise_sd * _ar1(noise, cfg.ar_coef))
            if shape.name == config.RT_MODALITY:
                x = cfg.rt_base_ms + cfg.rt_scale_ms * x
            trials[shape.name] = x.astype(np.float32).astype(np.float64)
        sessions.append(Session(f"P{p + 1:03d}", int(labels[p]), conditions, trials))

    dataset = Dataset("synthetic", cfg.modalities, sessions)
    truth = GroundTruth(patterns, weights, active_sets, multipliers, labels, leadfield, raw)
    log(f"synthetic cohort: {cfg.n_participants} participants x {T} trials, "
        f"{int(labels.sum())} positive, modalities {[m.name for m in cfg.modalities]}")
    return dataset, truth


def save_cohort(dataset, truth, directory):
    """Dataset directory loadable with `load_dataset`, plus the lead field and ground truth."""
    os.makedirs(directory, exist_ok=True)
    relpath = None
    if truth.raw_leadfield is not None:
        relpath = "leadfield"
        save_leadfield(truth.raw_leadfield, os.path.join(directory, relpath))
    manifest = save_dataset(dataset, directory, leadfield_relpath=relpath)
    truth_dir = os.path.join(directory, "truth")
    os.makedirs(truth_dir, exist_ok=True)
    for m, pattern in truth.patterns.items():
        write_tensor(os.path.join(truth_dir, f"{m}_pattern{config.TENSOR_SUFFIX}"), pattern.shape, pattern)
        write_tensor(os.path.join(truth_dir, f"{m}_weights{config.TENSOR_SUFFIX}"), pattern.shape,
                     truth.true_weights[m])
    doc = {
        "labels": {s.participant_id: int(s.label) for s in dataset.sessions},
        "multipliers": {s.participant_id: float(v) for s, v in zip(dataset.sessions, truth.multipliers)},
        "active_sets": {m: [int(i) for i in a] for m, a in truth.active_sets.items()},
    }
    with open(os.path.join(truth_dir, "truth.yaml"), "w") as f:
        yaml.safe_dump(doc, f, sort_keys=True)
    return manifest


def simulate(cfg, directory=None):
    """Generates a cohort and, given `directory`, writes it there. Returns (dataset, truth, manifest)."""
    dataset, truth = generate_cohort(cfg)
    manifest = None
    if directory is not None:
        manifest = save_cohort(dataset, truth, directory)
    return dataset, truth, manifest


def icc_oneway(scores, clusters):
    """ICC(1) = (MSB - MSW) / (MSB + (m - 1) MSW), m the mean cluster size, clipped at 0."""
    scores = np.asarray(scores, dtype=np.float64)
    ids, inverse, sizes = np.unique(clusters, return_inverse=True, return_counts=True)
    G, N = ids.size, scores.size
    means = np.bincount(inverse, weights=scores) / sizes
    grand = scores.mean()
    msb = float(np.sum(sizes * (means - grand) ** 2) / (G - 1))
    msw = float(np.sum((scores - means[inverse]) ** 2) / (N - G))
    m = float(np.mean(sizes))
    denominator = msb + (m - 1.0) * msw
    if denominator <= 0:
        return 0.0
    return max(0.0, (msb - msw) / denominator)


def kish_deff(dataset, modality, n_pcs=None):
    """
    Worst-case Kish design effect over the top principal components of the pooled trials,
    with sessions as clusters. Features are centered, not scaled.
    """
    n_pcs = n_pcs or config.DEFF_PCS
    sessions = [s for s in dataset.sessions if modality in s.trials]
    if len(sessions) < 2 or min(s.trial_count for s in sessions) < 2:
        raise InsufficientSamples(f"DEFF needs >= 2 sessions with >= 2 trials of {modality!r}")
    X = np.concatenate([s.trials[modality].reshape(s.trial_count, -1) for s in sessions])
    clusters = np.concatenate([np.full(s.trial_count, i) for i, s in enumerate(sessions)])
    limit = min(X.shape[0] - 1, X.shape[1])
    if n_pcs > limit:
        log(f"DEFF: reducing {n_pcs} principal components to {limit}", level="warning")
        n_pcs = limit
    scores = PCA(n_components=n_pcs, svd_solver="full").fit_transform(X)
    icc = np.array([icc_oneway(scores[:, j], clusters) for j in range(n_pcs)])
    m = float(np.mean([s.trial_count for s in sessions]))
    deff = 1.0 + (m - 1.0) * icc
    worst = float(np.max(deff))
    return DeffEstimate(deff, worst, m / worst, icc, n_pcs, m)
