"""
The USBL log posterior and prediction rule.

Trial evidence is mirror-constrained: z_t = sign(t) * sum_m alpha_m <X_t^m, W^m>_F with
sign = +1 on incongruent and -1 on congruent trials, and the session logit is
z = omega * mean_t z_t. Because z is linear in the trials, the likelihood only needs the
signed trial mean of every session, which is what the training batch holds.

Positive parameters live on the log scale in the flat vector; their priors include the
log-Jacobian.
"""
import os
from collections import OrderedDict, namedtuple

import jax
import jax.numpy as jnp
import numpy as np
import yaml
from jax.scipy import stats as jstats

import config
import leadfield as lf_ops
import priors
from errors import ConfigError, ModalityMismatch, NonFiniteError, ShapeMismatch
from tensor_io import Standardizer, apply_standardizers, read_tensor, write_tensor
from utils import sigmoid

jax.config.update("jax_enable_x64", True)

HORSESHOE_KINDS = ("horseshoe", "horseshoe-grw")
GRW_KINDS = ("horseshoe-grw", "eeg-dugh", "eeg-lowrank")
EEG_KINDS = ("eeg-dugh", "eeg-lowrank")

ModalitySpec = namedtuple('ModalitySpec', 'name prior channels samples regions rank')
ModelConfig = namedtuple('ModelConfig', 'modalities hyperpriors innovation_scale_prior include_eeg lowrank_max_rank')
Block = namedtuple('Block', 'name shape positive start stop')


def default_prior(name, channels, samples):
    if name in config.DEFAULT_PRIOR_BY_MODALITY:
        return config.DEFAULT_PRIOR_BY_MODALITY[name]
    return "gaussian" if channels == 1 and samples == 1 else "horseshoe-grw"


def build_model_config(dataset, modality_names, priors_by_modality=None, innovation_scale=None,
                       include_eeg=True, lowrank_max_rank=None, region_count=None):
    """
    Model configuration for the named modalities of `dataset`. EEG-Dugh modalities need the
    region count of the (preprocessed) lead field.
    """
    priors_by_modality = priors_by_modality or {}
    innovation_scale = innovation_scale or config.HALF_NORMAL_SCALE_INNOVATION
    max_rank = lowrank_max_rank or config.LOWRANK_MAX_RANK
    specs = []
    for name in modality_names:
        shape = dataset.modality(name)
        kind = priors_by_modality.get(name) or default_prior(name, shape.channels, shape.samples)
        if kind not in config.PRIOR_KINDS:
            raise ConfigError(f"modality {name!r}: unknown prior kind {kind!r}, expected one of {config.PRIOR_KINDS}")
        if kind in EEG_KINDS and not include_eeg:
            continue
        if kind in EEG_KINDS and shape.channels < 2:
            raise ConfigError(f"modality {name!r}: {kind} needs at least 2 channels")
        if kind == "eeg-dugh" and not region_count:
            raise ConfigError(f"modality {name!r}: eeg-dugh needs a lead field")
        specs.append(ModalitySpec(name, kind, shape.channels, shape.samples,
                                  int(region_count) if kind == "eeg-dugh" else 0,
                                  min(max_rank, shape.channels, shape.samples) if kind == "eeg-lowrank" else 0))
    if not specs:
        raise ConfigError("model needs at least one modality")
    if not innovation_scale > 0:
        raise ConfigError(f"innovation scale must be positive, got {innovation_scale}")
    hyper = priors.default_hyperpriors(innovation_scale)
    priors.validate_hyperpriors(hyper)
    return ModelConfig(tuple(specs), hyper, innovation_scale, include_eeg, max_rank)


def config_to_dict(cfg):
    return {
        "modalities": [dict(s._asdict()) for s in cfg.modalities],
        "hyperpriors": dict(cfg.hyperpriors._asdict()),
        "innovation_scale_prior": cfg.innovation_scale_prior,
        "include_eeg": cfg.include_eeg,
        "lowrank_max_rank": cfg.lowrank_max_rank,
    }


def config_from_dict(doc):
    return ModelConfig(tuple(ModalitySpec(**m) for m in doc["modalities"]),
                       priors.HyperpriorConfig(**doc["hyperpriors"]),
                       doc["innovation_scale_prior"], doc["include_eeg"], doc["lowrank_max_rank"])


class ParameterLayout(object):
    """Flat addressable layout of all parameter blocks."""

    def __init__(self, entries):
        self.blocks = OrderedDict()
        start = 0
        for name, shape, positive in entries:
            size = int(np.prod(shape)) if shape else 1
            self.blocks[name] = Block(name, tuple(shape), bool(positive), start, start + size)
            start += size
        self.size = start

    @property
    def names(self):
        return list(self.blocks)

    def raw(self, vector):
        """Unconstrained blocks (log scale for positive ones)."""
        return {b.name: vector[b.start:b.stop].reshape(b.shape) for b in self.blocks.values()}

    def unpack(self, vector, xp=jnp):
        raw = self.raw(vector)
        return {k: (xp.exp(v) if self.blocks[k].positive else v) for k, v in raw.items()}, raw

    def pack(self, values):
        vector = np.zeros(self.size)
        for b in self.blocks.values():
            v = np.asarray(values[b.name], dtype=np.float64).reshape(-1)
            vector[b.start:b.stop] = np.log(v) if b.positive else v
        return vector

    def entries(self):
        return [[b.name, list(b.shape), b.positive] for b in self.blocks.values()]


def parameter_layout(cfg):
    entries = []
    for spec in cfg.modalities:
        m, C, K = spec.name, spec.channels, spec.samples
        entries.append((f"{m}/alpha", (), False))
        if spec.prior in HORSESHOE_KINDS:
            entries += [(f"{m}/tau", (), True), (f"{m}/lambda", (C,), True), (f"{m}/beta", (C, K), False)]
        elif spec.prior == "gaussian":
            entries.append((f"{m}/W", (C, K), False))
        elif spec.prior == "eeg-dugh":
            entries += [(f"{m}/A", (C, K), False), (f"{m}/gamma", (spec.regions,), True)]
        elif spec.prior == "eeg-lowrank":
            r = spec.rank
            entries += [(f"{m}/U", (C, r), False), (f"{m}/tau", (), True), (f"{m}/lambda", (r,), True),
                        (f"{m}/s_raw", (r,), False), (f"{m}/V", (r, K), False)]
        if spec.prior in GRW_KINDS:
            entries.append((f"{m}/sigma_i", (), True))
    return ParameterLayout(entries)


class ModelParameters(object):

    def __init__(self, layout, vector, omega=1.0):
        self.layout = layout
        self.vector = np.asarray(vector, dtype=np.float64)
        if self.vector.shape != (layout.size,):
            raise ShapeMismatch(f"parameter vector has {self.vector.size} entries, layout needs {layout.size}")
        self.omega = float(omega)

    def values(self):
        return self.layout.unpack(self.vector, xp=np)[0]

    def with_vector(self, vector):
        return ModelParameters(self.layout, vector, self.omega)


def initial_parameters(layout, seed):
    rng = np.random.RandomState(seed)
    vector = np.zeros(layout.size)
    for b in layout.blocks.values():
        if b.positive:
            vector[b.start:b.stop] = config.INIT_LOG_SCALE
        elif b.name.endswith("/alpha"):
            # alpha = 0 is a saddle of the mirror-constrained likelihood
            vector[b.start:b.stop] = config.INIT_ALPHA
        else:
            vector[b.start:b.stop] = rng.normal(0.0, config.INIT_WEIGHT_SD, size=b.stop - b.start)
    return ModelParameters(layout, vector)


def modality_weights(values, spec, ctx):
    m = spec.name
    if spec.prior in HORSESHOE_KINDS:
        return priors.assemble_horseshoe_weights_jnp(values[f"{m}/tau"], values[f"{m}/lambda"], values[f"{m}/beta"])
    if spec.prior == "gaussian":
        return values[f"{m}/W"]
    if spec.prior == "eeg-dugh":
        return lf_ops.haufe_weights_jnp(ctx["data_chol"], values[f"{m}/A"])
    s = values[f"{m}/tau"] * values[f"{m}/lambda"] * values[f"{m}/s_raw"]
    return values[f"{m}/U"] @ (s[:, None] * values[f"{m}/V"])


def log_prior_terms(values, raw, cfg, context):
    h = cfg.hyperpriors
    terms = OrderedDict()
    for spec in cfg.modalities:
        m = spec.name
        terms[f"{m}/alpha"] = jstats.norm.logpdf(values[f"{m}/alpha"], h.alpha_loc, h.alpha_scale)
        if spec.prior in GRW_KINDS:
            terms[f"{m}/sigma_i"] = priors.log_scale_half_logpdf_jnp(
                "half-normal", raw[f"{m}/sigma_i"], h.half_normal_scale_innovation)
        if spec.prior in HORSESHOE_KINDS or spec.prior == "eeg-lowrank":
            terms[f"{m}/tau"] = priors.log_scale_half_logpdf_jnp(
                "half-cauchy", raw[f"{m}/tau"], h.half_cauchy_scale_global)
            terms[f"{m}/lambda"] = jnp.sum(priors.log_scale_half_logpdf_jnp(
                "half-cauchy", raw[f"{m}/lambda"], h.half_cauchy_scale_local))

        if spec.prior == "horseshoe":
            terms[f"{m}/beta"] = jnp.sum(jstats.norm.logpdf(values[f"{m}/beta"], 0.0, 1.0))
        elif spec.prior == "horseshoe-grw":
            terms[f"{m}/beta"] = priors.grw_logdensity_jnp(
                values[f"{m}/beta"], config.GRW_INTERCEPT_SCALE, values[f"{m}/sigma_i"])
        elif spec.prior == "gaussian":
            terms[f"{m}/W"] = jnp.sum(jstats.norm.logpdf(values[f"{m}/W"], 0.0, config.GAUSSIAN_WEIGHT_SCALE))
        elif spec.prior == "eeg-dugh":
            ctx = context[m]
            sigma_u = lf_ops.spatial_covariance_jnp(values[f"{m}/gamma"], ctx["outer_products"], ctx["noise_cov"])
            sigma_v = priors.grw_covariance_jnp(spec.samples, config.GRW_INTERCEPT_SCALE, values[f"{m}/sigma_i"])
            terms[f"{m}/A"] = lf_ops.matrix_normal_logdensity_jnp(
                values[f"{m}/A"], jnp.linalg.cholesky(sigma_u), jnp.linalg.cholesky(sigma_v))
            terms[f"{m}/gamma"] = jnp.sum(priors.log_scale_half_logpdf_jnp(
                "half-student-t", raw[f"{m}/gamma"], h.half_student_t_scale, h.half_student_t_df))
        elif spec.prior == "eeg-lowrank":
            terms[f"{m}/U"] = jnp.sum(jstats.norm.logpdf(values[f"{m}/U"], 0.0, config.LOWRANK_FACTOR_SCALE))
            terms[f"{m}/s_raw"] = jnp.sum(jstats.norm.logpdf(values[f"{m}/s_raw"], 0.0, 1.0))
            terms[f"{m}/V"] = priors.grw_logdensity_jnp(
                values[f"{m}/V"], config.GRW_INTERCEPT_SCALE, values[f"{m}/sigma_i"])
    return terms


def session_logits_jnp(values, cfg, data):
    z = 0.0
    for spec in cfg.modalities:
        W = modality_weights(values, spec, data["context"].get(spec.name))
        z = z + values[f"{spec.name}/alpha"] * jnp.einsum("sck,ck->s", data["signed_means"][spec.name], W)
    return data["omega"] * z


def make_terms_fn(layout, cfg):
    def terms_fn(vector, data):
        values, raw = layout.unpack(vector)
        z = session_logits_jnp(values, cfg, data)
        y = data["labels"]
        terms = OrderedDict(likelihood=jnp.sum(y * jax.nn.log_sigmoid(z) + (1.0 - y) * jax.nn.log_sigmoid(-z)))
        terms.update(log_prior_terms(values, raw, cfg, data["context"]))
        return terms
    return terms_fn


def signed_mean(session, modality):
    if modality not in session.trials:
        raise ModalityMismatch(f"session {session.participant_id} has no {modality!r} segments")
    return np.tensordot(session.signs, session.trials[modality], axes=1) / session.trial_count


def build_batch(sessions, cfg, context, omega=1.0):
    return {
        "signed_means": {s.name: np.stack([signed_mean(x, s.name) for x in sessions]) for s in cfg.modalities},
        "labels": np.array([x.label for x in sessions], dtype=np.float64),
        "omega": float(omega),
        "context": context,
    }


def build_context(cfg, covariances, leadfield):
    """Fixed arrays of every EEG-Dugh modality: Cholesky of Sigma_X, Sigma_eps and region outer products."""
    context = {}
    for spec in cfg.modalities:
        if spec.prior != "eeg-dugh":
            continue
        if leadfield is None or spec.name not in covariances:
            raise ConfigError(f"modality {spec.name!r}: eeg-dugh needs a lead field and training covariances")
        if leadfield.n_channels != spec.channels or leadfield.region_count != spec.regions:
            raise ShapeMismatch(f"lead field is {leadfield.n_channels} channels / {leadfield.region_count} regions, "
                                f"{spec.name} needs {spec.channels} / {spec.regions}")
        cov = covariances[spec.name]
        context[spec.name] = {
            "data_chol": lf_ops.lower_cholesky(cov.data_cov, f"{spec.name} data covariance"),
            "noise_cov": np.asarray(cov.noise_cov, dtype=np.float64),
            "outer_products": lf_ops.region_outer_products(leadfield),
        }
    return context


class Objective(object):
    """Log posterior of one training batch with its exact gradient (JAX)."""

    def __init__(self, layout, cfg, batch):
        self.layout = layout
        self.cfg = cfg
        self.batch = jax.tree_util.tree_map(jnp.asarray, batch)
        terms_fn = make_terms_fn(layout, cfg)
        self._terms = jax.jit(terms_fn)

        def negative(vector, data):
            return -sum(terms_fn(vector, data).values())

        self._neg = jax.jit(negative)
        self._neg_value_and_grad = jax.jit(jax.value_and_grad(negative))

    def terms(self, vector):
        return {k: float(v) for k, v in self._terms(jnp.asarray(vector), self.batch).items()}

    def value(self, vector):
        terms = self.terms(vector)
        for name, v in terms.items():
            if not np.isfinite(v):
                raise NonFiniteError(name)
        return float(sum(terms.values()))

    def negative_value(self, vector):
        return float(self._neg(jnp.asarray(vector), self.batch))

    def negative_value_and_grad(self, vector):
        value, grad = self._neg_value_and_grad(jnp.asarray(vector), self.batch)
        return float(value), np.asarray(grad)

    def gradient(self, vector):
        """Gradient of the log posterior (not negated)."""
        return -self.negative_value_and_grad(vector)[1]


def log_posterior_terms(params, dataset, covariances, leadfield, cfg):
    context = build_context(cfg, covariances, leadfield)
    objective = Objective(params.layout, cfg, build_batch(dataset.sessions, cfg, context, params.omega))
    return objective.terms(params.vector)


def log_posterior(params, dataset, covariances, leadfield, cfg):
    """Sessions of `dataset` must already be standardized with training scales."""
    context = build_context(cfg, covariances, leadfield)
    objective = Objective(params.layout, cfg, build_batch(dataset.sessions, cfg, context, params.omega))
    return objective.value(params.vector)


def weights_from_vector(cfg, layout, context, vector):
    values, _ = layout.unpack(jnp.asarray(vector))
    weights = {s.name: np.asarray(modality_weights(values, s, context.get(s.name))) for s in cfg.modalities}
    alphas = {s.name: float(values[f"{s.name}/alpha"]) for s in cfg.modalities}
    return weights, alphas


def trial_logits_from_weights(weights, alphas, session):
    total = np.zeros(session.trial_count)
    for m, W in weights.items():
        if m not in session.trials:
            raise ModalityMismatch(f"session {session.participant_id} has no {m!r} segments")
        total += alphas[m] * np.einsum("tck,ck->t", session.trials[m], W)
    return session.signs * total


def session_logit_from_weights(weights, alphas, session, omega=1.0):
    return float(omega * np.mean(trial_logits_from_weights(weights, alphas, session)))


class FittedModel(object):

    def __init__(self, cfg, params, context, standardizers, covariances=None, curvature=None,
                 curvature_flags=None, trace=None):
        self.config = cfg
        self.params = params
        self.context = context
        self.standardizers = standardizers
        self.covariances = covariances or {}
        self.curvature = curvature
        self.curvature_flags = curvature_flags
        self.trace = trace or []
        self._weights = None

    @property
    def layout(self):
        return self.params.layout

    @property
    def modalities(self):
        return [s.name for s in self.config.modalities]

    def weights(self):
        if self._weights is None:
            self._weights = weights_from_vector(self.config, self.layout, self.context, self.params.vector)
        return self._weights

    def prepare(self, session):
        missing = [m for m in self.modalities if m not in session.trials]
        if missing:
            raise ModalityMismatch(f"session {session.participant_id} lacks modalities {missing}")
        return apply_standardizers(self.standardizers, session)

    def predict(self, session, omega=None):
        """Probability for an unstandardized session."""
        return predict_session(self, self.prepare(session), omega)


def trial_logit(model, session, t):
    weights, alphas = model.weights()
    total = 0.0
    for m, W in weights.items():
        total += alphas[m] * float(np.sum(session.segment(m, t).data * W))
    return session.conditions[t].sign * total


def session_logit(model, session, omega=None):
    omega = model.params.omega if omega is None else omega
    weights, alphas = model.weights()
    return session_logit_from_weights(weights, alphas, session, omega)


def predict_session(model, session, omega=None):
    """logistic(omega * z) for a standardized session; omega defaults to the model's (1 before calibration)."""
    return float(sigmoid(session_logit(model, session, omega)))


def predict_session_predictive(model, session, n_draws=200, seed=0, omega=None):
    """Average probability over draws from the diagonal Laplace approximation."""
    if model.curvature is None:
        raise ConfigError("posterior-predictive probabilities need Laplace curvature")
    omega = model.params.omega if omega is None else omega
    rng = np.random.RandomState(seed)
    sd = 1.0 / np.sqrt(model.curvature)
    probs = []
    for _ in range(n_draws):
        vector = model.params.vector + sd * rng.normal(size=sd.shape)
        weights, alphas = weights_from_vector(model.config, model.layout, model.context, vector)
        probs.append(sigmoid(session_logit_from_weights(weights, alphas, session, omega)))
    return float(np.mean(probs))


def _tensor_path(directory, name):
    return os.path.join(directory, name + config.TENSOR_SUFFIX)


def save_model(model, directory, extra=None):
    os.makedirs(directory, exist_ok=True)
    write_tensor(_tensor_path(directory, "params"), (model.layout.size,), model.params.vector)
    if model.curvature is not None:
        write_tensor(_tensor_path(directory, "curvature"), (model.layout.size,), model.curvature)
    for m, ctx in model.context.items():
        write_tensor(_tensor_path(directory, f"{m}_outer_products"), ctx["outer_products"].shape, ctx["outer_products"])
    covariances = {}
    for m, cov in model.covariances.items():
        for field in ("data_cov", "noise_cov", "post_cov", "pre_cov"):
            write_tensor(_tensor_path(directory, f"{m}_{field}"), getattr(cov, field).shape, getattr(cov, field))
        covariances[m] = {"shrinkage": float(cov.shrinkage)}
    doc = {
        "config": config_to_dict(model.config),
        "layout": model.layout.entries(),
        "omega": model.params.omega,
        "standardizers": {m: {"scales": [float(v) for v in s.channel_scales],
                              "offsets": [float(v) for v in s.channel_offsets]}
                          for m, s in model.standardizers.items()},
        "covariances": covariances,
        "has_curvature": model.curvature is not None,
    }
    if extra:
        doc.update(extra)
    with open(os.path.join(directory, "model.yaml"), "w") as f:
        yaml.safe_dump(doc, f, sort_keys=True)


def load_model(directory):
    with open(os.path.join(directory, "model.yaml")) as f:
        doc = yaml.safe_load(f)
    cfg = config_from_dict(doc["config"])
    layout = parameter_layout(cfg)
    if layout.entries() != doc["layout"]:
        raise ShapeMismatch(f"{directory}: stored layout does not match the model configuration")
    vector = read_tensor(_tensor_path(directory, "params"))[1].astype(np.float64)
    params = ModelParameters(layout, vector, doc["omega"])
    standardizers = {m: Standardizer(m, np.array(s["scales"]), np.array(s["offsets"]))
                     for m, s in doc["standardizers"].items()}
    covariances = {}
    for m, c in doc["covariances"].items():
        fields = [read_tensor(_tensor_path(directory, f"{m}_{f}"))[1].astype(np.float64)
                  for f in ("data_cov", "noise_cov", "post_cov", "pre_cov")]
        covariances[m] = lf_ops.CovarianceEstimate(*fields, c["shrinkage"])
    context = {}
    for spec in cfg.modalities:
        if spec.prior == "eeg-dugh":
            cov = covariances[spec.name]
            context[spec.name] = {
                "data_chol": lf_ops.lower_cholesky(cov.data_cov, f"{spec.name} data covariance"),
                "noise_cov": cov.noise_cov,
                "outer_products": read_tensor(_tensor_path(directory, f"{spec.name}_outer_products"))[1]
                .astype(np.float64),
            }
    curvature = None
    if doc.get("has_curvature"):
        curvature = read_tensor(_tensor_path(directory, "curvature"))[1].astype(np.float64)
    return FittedModel(cfg, params, context, standardizers, covariances, curvature), doc
