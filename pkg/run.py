import copy
import datetime
import os
import sys

import click
import numpy as np
import yaml

import config
from errors import ConfigError, DataError, NumericalError
from utils import dump_json, log

DEFAULT_RUN_CONFIG = {
    "seed": config.CV_SEED,
    "jobs": 1,
    "data": None,
    "out": None,
    "model": {
        "modalities": None,
        "priors": {},
        "innovation_scale": config.HALF_NORMAL_SCALE_INNOVATION,
        "include_eeg": True,
        "lowrank_max_rank": config.LOWRANK_MAX_RANK,
        "kernel_multiplier": config.KERNEL_MULTIPLIER,
        "steps": config.STEPS,
        "lr_start": config.LR_START,
        "lr_end": config.LR_END,
        "grad_clip_norm": config.GRAD_CLIP_NORM,
        "laplace": False,
    },
    "cv": {
        "folds": config.CV_FOLDS,
        "repeats": config.CV_REPEATS,
        "stratified": config.CV_STRATIFIED,
        "allow_unstratified": False,
    },
    "method": {
        "names": ["usbl"],
        "mode": "recoded",
        "windows": "short",
        "modality_sets": None,
    },
    "calibration": {
        "enabled": False,
        "folds": config.CALIBRATION_FOLDS,
        "warmup": config.MCMC_WARMUP,
        "samples": config.MCMC_SAMPLES,
    },
    "synth": {
        "n_participants": config.SYNTH_N_PARTICIPANTS,
        "class_balance": config.SYNTH_CLASS_BALANCE,
        "blocks": config.SYNTH_BLOCKS,
        "trials_per_block": config.SYNTH_TRIALS_PER_BLOCK,
        "effect_size": config.SYNTH_EFFECT_SIZE,
        "participant_variability": config.SYNTH_PARTICIPANT_VARIABILITY,
        "trial_noise_sd": config.SYNTH_TRIAL_NOISE_SD,
        "session_effect_sd": config.SYNTH_SESSION_EFFECT_SD,
        "ar_coef": config.SYNTH_AR_COEF,
        "sparsity": config.SYNTH_SPARSITY,
        "n_vertices": config.SYNTH_N_VERTICES,
        "n_regions": config.SYNTH_N_REGIONS,
        "rt_base_ms": config.SYNTH_RT_BASE_MS,
        "rt_scale_ms": config.SYNTH_RT_SCALE_MS,
        "modalities": [dict(zip(("name", "channels", "samples", "sample_rate", "stimulus_index"), m))
                       for m in config.SYNTH_MODALITIES],
        "shuffle_labels": False,
    },
    "report": {
        "format": "text",
    },
}
# sections whose values are free-form mappings
OPEN_KEYS = {("model", "priors")}


def _merge(base, update, path=()):
    for key, value in update.items():
        where = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(where)!r}")
        if isinstance(base[key], dict) and where not in OPEN_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {'.'.join(where)!r} must be a mapping")
            _merge(base[key], value, where)
        else:
            base[key] = value
    return base


def resolve_run_config(config_path=None, **flags):
    """defaults < config file < flags; flags are dotted keys, None means unset."""
    resolved = copy.deepcopy(DEFAULT_RUN_CONFIG)
    if config_path:
        if not os.path.exists(config_path):
            raise ConfigError(f"config file {config_path} does not exist")
        with open(config_path) as f:
            doc = yaml.safe_load(f) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{config_path}: config document must be a mapping")
        _merge(resolved, doc)
    for dotted, value in flags.items():
        if value is None:
            continue
        *sections, key = dotted.split(".")
        node = resolved
        for s in sections:
            node = node[s]
        if key not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[key] = value
    return resolved


def write_run_outputs(resolved, out, command):
    """Resolved-config echo and timestamp metadata next to the primary output."""
    stem = os.path.splitext(os.path.normpath(out))[0]
    with open(stem + ".config.yaml", "w") as f:
        yaml.safe_dump(resolved, f, sort_keys=True)
    dump_json({"command": command, "argv": sys.argv[1:], "timestamp": datetime.datetime.now().isoformat()},
              stem + ".meta.json")


def _parse_modalities(values):
    return [tuple(m.strip() for m in v.split(",") if m.strip()) for v in values]


def _parse_priors(values):
    priors = {}
    for v in values:
        if "=" not in v:
            raise ConfigError(f"--prior expects MODALITY=KIND, got {v!r}")
        name, kind = v.split("=", 1)
        priors[name.strip()] = kind.strip()
    return priors


def _load(resolved, labeled=True):
    from tensor_io import load_dataset

    if not resolved["data"]:
        raise ConfigError(f"no dataset given: pass --data or set {config.DATA_DIR_ENVVAR}")
    return load_dataset(resolved["data"], labeled=labeled)


def _leadfield(dataset, resolved):
    from leadfield import dataset_leadfield

    return dataset_leadfield(dataset, resolved["model"]["kernel_multiplier"])


def _model_options(resolved):
    m = resolved["model"]
    return {"priors_by_modality": m["priors"] or None, "innovation_scale": m["innovation_scale"],
            "include_eeg": m["include_eeg"], "lowrank_max_rank": m["lowrank_max_rank"]}


def _schedule(resolved, seed):
    from infer import default_schedule

    m = resolved["model"]
    return default_schedule(steps=m["steps"], lr_start=m["lr_start"], lr_end=m["lr_end"],
                            grad_clip_norm=m["grad_clip_norm"], seed=seed)


def _model_config(dataset, resolved, leadfield):
    from model import build_model_config

    modalities = resolved["model"]["modalities"] or [m.name for m in dataset.modalities]
    return build_model_config(dataset, modalities, region_count=leadfield.region_count if leadfield else None,
                              **_model_options(resolved))


def _mcmc(resolved):
    from infer import default_mcmc

    return default_mcmc(warmup=resolved["calibration"]["warmup"], samples=resolved["calibration"]["samples"])


def common_options(f):
    f = click.option('--config', 'config_path', type=click.Path(), default=None,
                     help='YAML run configuration')(f)
    f = click.option('--seed', type=int, default=None, help='master seed')(f)
    f = click.option('--progress', is_flag=True, default=False, help='show progress bars')(f)
    return f


def data_option(f):
    return click.option('--data', type=click.Path(), default=None, envvar=config.DATA_DIR_ENVVAR,
                        help='dataset directory or manifest')(f)


@click.group()
def usbl():
    pass


@usbl.command()
@common_options
@click.option('--out', type=click.Path(), required=True, help='directory to write the cohort to')
@click.option('--participants', type=int, default=None)
@click.option('--effect-size', type=float, default=None)
@click.option('--blocks', type=int, default=None)
@click.option('--trials-per-block', type=int, default=None)
@click.option('--session-effect-sd', type=float, default=None)
@click.option('--shuffle-labels', is_flag=True, default=False)
def simulate(config_path, seed, progress, out, participants, effect_size, blocks, trials_per_block,
             session_effect_sd, shuffle_labels):
    """Generate a synthetic cohort."""
    from evaluation import shuffle_labels as shuffle
    from synth import default_synth_config, save_cohort, generate_cohort

    resolved = resolve_run_config(config_path, **{
        "seed": seed, "out": out, "synth.n_participants": participants, "synth.effect_size": effect_size,
        "synth.blocks": blocks, "synth.trials_per_block": trials_per_block,
        "synth.session_effect_sd": session_effect_sd, "synth.shuffle_labels": shuffle_labels or None})
    s = dict(resolved["synth"])
    shuffled = s.pop("shuffle_labels")
    s["modalities"] = tuple((m["name"], int(m["channels"]), int(m["samples"]), float(m.get("sample_rate", 1.0)),
                             int(m.get("stimulus_index", 0))) for m in s["modalities"])
    cfg = default_synth_config(seed=resolved["seed"], **s)
    dataset, truth = generate_cohort(cfg)
    if shuffled:
        dataset = shuffle(dataset, resolved["seed"])
    manifest = save_cohort(dataset, truth, out)
    write_run_outputs(resolved, out, "simulate")
    click.echo(manifest)


@usbl.command()
@common_options
@data_option
@click.option('--out', type=click.Path(), required=True, help='model directory')
@click.option('--modalities', type=str, default=None, help='comma-separated modalities')
@click.option('--prior', multiple=True, help='MODALITY=KIND prior override')
@click.option('--innovation-scale', type=click.Choice(["0.1", "0.01"]), default=None)
@click.option('--steps', type=int, default=None)
@click.option('--laplace', is_flag=True, default=False)
@click.option('--trace', type=click.Path(), default=None, help='write the optimizer trace here (JSON)')
def fit(config_path, seed, progress, data, out, modalities, prior, innovation_scale, steps, laplace, trace):
    """Fit the stage-1 model on a whole dataset."""
    from infer import fit_usbl
    from model import save_model
    from monitors import LogMonitor, TraceMonitor

    resolved = resolve_run_config(config_path, **_model_flags(seed, data, out, modalities, prior, innovation_scale,
                                                              steps, laplace))
    dataset = _load(resolved)
    leadfield = _leadfield(dataset, resolved)
    cfg = _model_config(dataset, resolved, leadfield)
    monitors = [LogMonitor(f=max(1, resolved["model"]["steps"] // 10), prefix="fit: ")]
    if trace:
        monitors.append(TraceMonitor(f=10, dest=trace))
    model = fit_usbl(dataset, cfg, _schedule(resolved, resolved["seed"]), resolved["seed"], leadfield, monitors,
                     laplace=resolved["model"]["laplace"], print_progress=progress)
    for m in monitors:
        m.dump()
    save_model(model, out)
    write_run_outputs(resolved, out, "fit")
    click.echo(out)


def _model_flags(seed, data, out, modalities, prior, innovation_scale, steps, laplace=None):
    return {
        "seed": seed, "data": data, "out": out,
        "model.modalities": list(_parse_modalities([modalities])[0]) if modalities else None,
        "model.priors": _parse_priors(prior) if prior else None,
        "model.innovation_scale": float(innovation_scale) if innovation_scale else None,
        "model.steps": steps, "model.laplace": laplace or None,
    }


@usbl.command(name="calibrate")
@common_options
@data_option
@click.option('--out', type=click.Path(), required=True, help='calibrated model directory')
@click.option('--modalities', type=str, default=None)
@click.option('--prior', multiple=True)
@click.option('--innovation-scale', type=click.Choice(["0.1", "0.01"]), default=None)
@click.option('--steps', type=int, default=None)
@click.option('--jobs', type=int, default=None)
def calibrate_command(config_path, seed, progress, data, out, modalities, prior, innovation_scale, steps, jobs):
    """Fit and calibrate the model by nested cross-validation."""
    from calibrate import calibrate, save_calibrated
    from infer import fit_usbl

    flags = _model_flags(seed, data, out, modalities, prior, innovation_scale, steps)
    flags["jobs"] = jobs
    resolved = resolve_run_config(config_path, **flags)
    dataset = _load(resolved)
    leadfield = _leadfield(dataset, resolved)
    cfg = _model_config(dataset, resolved, leadfield)
    schedule = _schedule(resolved, resolved["seed"])

    def fit_procedure(train, model_config, fold_seed):
        return fit_usbl(train, model_config, schedule, fold_seed, leadfield)

    model = calibrate(dataset, cfg, fit_procedure, resolved["seed"], resolved["calibration"]["folds"],
                      _mcmc(resolved), resolved["jobs"])
    save_calibrated(model, out)
    write_run_outputs(resolved, out, "calibrate")
    click.echo(f"omega median {model.omega_point:.6g}")


@usbl.command()
@data_option
@click.option('--model', 'model_dir', type=click.Path(), required=True)
@click.option('--out', type=click.Path(), required=True, help='predictions document (JSON)')
@click.option('--predictive', type=int, default=0, help='posterior-predictive draws (needs Laplace curvature)')
@click.option('--seed', type=int, default=None)
@click.option('--config', 'config_path', type=click.Path(), default=None, help='YAML run configuration')
def predict(data, model_dir, out, predictive, seed, config_path):
    """Session probabilities for a (possibly unlabeled) dataset."""
    from calibrate import load_calibrated
    from model import load_model, predict_session_predictive

    resolved = resolve_run_config(config_path, data=data, out=out, seed=seed)
    dataset = _load(resolved, labeled=False)
    if os.path.exists(os.path.join(model_dir, "omega_samples" + config.TENSOR_SUFFIX)):
        model = load_calibrated(model_dir).base
    else:
        model = load_model(model_dir)[0]
    doc = {}
    for s in dataset.sessions:
        row = {"probability": model.predict(s), "label": s.label}
        if predictive:
            row["predictive"] = predict_session_predictive(model, model.prepare(s), predictive, resolved["seed"])
        doc[s.participant_id] = row
    dump_json(doc, out)
    write_run_outputs(resolved, out, "predict")


@usbl.command(name="eval")
@common_options
@data_option
@click.option('--out', type=click.Path(), required=True, help='results document (JSON)')
@click.option('--method', 'methods', multiple=True, type=click.Choice(["usbl", "slda", "ridge", "dscore"]))
@click.option('--modalities', multiple=True, help='comma-separated modality set; repeat for ablation grids')
@click.option('--mode', type=click.Choice(["recoded", "direct"]), default=None)
@click.option('--windows', type=click.Choice(["short", "long"]), default=None)
@click.option('--prior', multiple=True)
@click.option('--innovation-scale', type=click.Choice(["0.1", "0.01"]), default=None)
@click.option('--steps', type=int, default=None)
@click.option('--folds', type=int, default=None)
@click.option('--repeats', type=int, default=None)
@click.option('--jobs', type=int, default=None)
@click.option('--calibrate', 'calibrate_flag', is_flag=True, default=False)
@click.option('--shuffle-labels', is_flag=True, default=False)
def eval_command(config_path, seed, progress, data, out, methods, modalities, mode, windows, prior,
                 innovation_scale, steps, folds, repeats, jobs, calibrate_flag, shuffle_labels):
    """Repeated k-fold cross-validation of one or more configurations."""
    from evaluation import CVConfig, MethodSpec, run_experiment

    flags = _model_flags(seed, data, out, None, prior, innovation_scale, steps)
    flags.update({
        "jobs": jobs, "cv.folds": folds, "cv.repeats": repeats, "calibration.enabled": calibrate_flag or None,
        "method.names": list(methods) or None, "method.mode": mode, "method.windows": windows,
        "method.modality_sets": [list(m) for m in _parse_modalities(modalities)] or None,
    })
    resolved = resolve_run_config(config_path, **flags)
    dataset = _load(resolved)
    leadfield = _leadfield(dataset, resolved)
    sets = [tuple(m) for m in (resolved["method"]["modality_sets"] or [[m.name for m in dataset.modalities]])]

    specs = []
    for name in resolved["method"]["names"]:
        if name == "dscore":
            specs.append(MethodSpec("dscore", (config.RT_MODALITY,), resolved["method"]["mode"]))
            continue
        for modality_set in sets:
            specs.append(MethodSpec(name, modality_set, resolved["method"]["mode"], resolved["method"]["windows"],
                                    _model_options(resolved), _schedule(resolved, resolved["seed"])))
    cv = CVConfig(resolved["cv"]["folds"], resolved["cv"]["repeats"], resolved["seed"],
                  resolved["cv"]["stratified"], resolved["cv"]["allow_unstratified"])
    calibration = {"n_folds": resolved["calibration"]["folds"], "mcmc": _mcmc(resolved)}
    table = run_experiment(dataset, specs, cv, resolved["calibration"]["enabled"], resolved["jobs"], leadfield,
                           shuffle_labels, calibration, print_progress=progress)
    table.write(out)
    write_run_outputs(resolved, out, "eval")
    table.write_metrics()


@usbl.command()
@data_option
@click.option('--out', type=click.Path(), default=None, help='D-score document (JSON); stdout if omitted')
@click.option('--trim', is_flag=True, default=False, help='drop RTs above 10 s and below 300 ms')
@click.option('--modality', default=None, help='reaction-time modality')
def dscore(data, out, trim, modality):
    """D-scores per session."""
    from baselines import dscore as score, dscore_classify, session_rts
    from errors import UndefinedMetric
    from evaluation import auc

    resolved = resolve_run_config(None, data=data, out=out)
    dataset = _load(resolved, labeled=False)
    rows = {}
    for s in dataset.sessions:
        d = score(session_rts(s, modality), s.conditions, trim)
        rows[s.participant_id] = dict(d._asdict(), predicted=dscore_classify(d.d), label=s.label)
    doc = {"sessions": rows, "trim": trim}
    labeled = [r for r in rows.values() if r["label"] is not None]
    if labeled:
        try:
            doc["auc"] = auc([r["d"] for r in labeled], [r["label"] for r in labeled])
        except UndefinedMetric:
            doc["auc"] = None
    _emit(doc, out, resolved, "dscore")


@usbl.command()
@data_option
@click.option('--modality', default="eeg")
@click.option('--pcs', type=int, default=None)
@click.option('--out', type=click.Path(), default=None)
def deff(data, modality, pcs, out):
    """Kish design effect of within-session trial correlation."""
    from synth import kish_deff

    resolved = resolve_run_config(None, data=data, out=out)
    estimate = kish_deff(_load(resolved, labeled=False), modality, pcs)
    _emit(dict(estimate._asdict(), modality=modality), out, resolved, "deff")


def _emit(doc, out, resolved, command):
    if out:
        dump_json(doc, out)
        write_run_outputs(resolved, out, command)
    else:
        import json
        from utils import _json_serialize
        click.echo(json.dumps(doc, sort_keys=True, indent=2, default=_json_serialize))


@usbl.command()
@click.argument('results', type=click.Path())
@click.option('--config', 'config_path', type=click.Path(), default=None)
@click.option('--format', 'fmt', type=click.Choice(["text", "csv"]), default=None)
@click.option('--roc', type=click.Path(), default=None, help='write pooled ROC points (CSV)')
@click.option('--compare', nargs=2, type=str, default=None, help='two configurations for a paired test')
def report(results, config_path, fmt, roc, compare):
    """Render a results document."""
    from track import ResultsTable

    resolved = resolve_run_config(config_path, **{"report.format": fmt})
    table = ResultsTable.load(results)
    click.echo(table.render(resolved["report"]["format"]))
    if roc:
        table.roc(roc)
    if compare:
        test = table.compare(*compare)
        click.echo(f"{compare[0]} - {compare[1]}: mean dAUC {test.mean:.4f}, t {test.t:.3f}, "
                   f"df {test.df}, p {test.p:.4g}")


@usbl.command()
def test():
    """Run the test suite."""
    from run_tests import test as run_suite

    run_suite()


def main(argv=None):
    try:
        usbl.main(args=argv, prog_name="usbl", standalone_mode=False)
    except click.exceptions.Abort:
        log("aborted", level="warning")
        return config.EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return config.EXIT_USAGE
    except ConfigError as e:
        log(f"usage error: {e}")
        return config.EXIT_USAGE
    except DataError as e:
        log(f"data error [{e.code}]: {e}")
        return config.EXIT_DATA
    except NumericalError as e:
        log(f"numerical failure [{e.code}]: {e}")
        return config.EXIT_NUMERICAL
    except np.linalg.LinAlgError as e:
        log(f"numerical failure [linalg]: {e}")
        return config.EXIT_NUMERICAL
    return config.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
