import datetime
import json
import sys

import numpy as np
from scipy import linalg
from scipy.special import expit

import config
from errors import NotPositiveDefinite


def log(str, logfile=None, timestamp=False, level="info"):
    if timestamp:
        str = f"[{datetime.datetime.now()}] {str}"
    if level == "warning":
        str = f"WARNING: {str}"

    print(str, file=sys.stderr)
    logfile = logfile or config.LOGFILE
    if logfile is not None:
        with open(logfile, mode='a') as f:
            print(str, file=f)


def _json_serialize(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, datetime.datetime):
        return o.__str__()
    if hasattr(o, "_asdict"):
        return o._asdict()
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


def dump_json(obj, path):
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    text = json.dumps(obj, sort_keys=True, indent=2, default=_json_serialize, allow_nan=True)
    with open(path, "w") as f:
        f.write(text + "\n")


def load_json(path):
    with open(path) as f:
        return json.load(f)


def derive_seed(master_seed, *keys):
    """
    Derive an independent 32-bit seed from a master seed and integer keys, e.g.
    (repeat, fold). The same keys always give the same seed regardless of the
    order in which units are executed.
    """
    ss = np.random.SeedSequence([int(master_seed)] + [int(k) for k in keys])
    return int(ss.generate_state(1)[0])


def cholesky_with_jitter(matrix, what="matrix"):
    """
    Lower Cholesky factor as returned by `scipy.linalg.cho_factor`. On failure one
    jitter of `config.JITTER` x mean diagonal is added before giving up.

    Returns:
        (factor, jittered): factor tuple usable with `cho_solve`, and whether jitter was needed
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    try:
        return linalg.cho_factor(matrix, lower=True), False
    except linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(matrix)))
    jitter = config.JITTER * (scale if scale > 0 else 1.0)
    try:
        factor = linalg.cho_factor(matrix + jitter * np.eye(matrix.shape[0]), lower=True)
    except linalg.LinAlgError:
        raise NotPositiveDefinite(f"{what} is not positive definite even after jitter {jitter:.3g}")
    log(f"{what}: added jitter {jitter:.3g} before factorization", level="warning")
    return factor, True


def sigmoid(x):
    return expit(x)


def clamped_logit(p, clamp=None):
    clamp = config.LOGIT_CLAMP if clamp is None else clamp
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        z = np.log(p) - np.log1p(-p)
    return np.clip(z, -clamp, clamp)
