"""
Dataset model, `.usbl` tensor files, YAML manifests and per-channel standardization.

A dataset is a list of sessions (one per participant). Each session stores, per modality,
a T x C x K array of trial segments and one condition sequence shared by all modalities.
"""
import os
from collections import namedtuple
from enum import Enum

import numpy as np
import yaml

import config
from errors import (BadMagic, ConditionLengthMismatch, DataError, DtypeMismatch, InsufficientSamples,
                    LabelMissing, MissingCondition, MissingFile, ModalityMismatch, ShapeMismatch,
                    TruncatedPayload, UnsupportedVersion, ZeroVariance)
from frozen import tensorfile


class Condition(str, Enum):
    CONGRUENT = "C"
    INCONGRUENT = "I"

    @property
    def sign(self):
        # mirror constraint: incongruent trials enter with +1
        return 1 if self is Condition.INCONGRUENT else -1


ModalityShape = namedtuple('ModalityShape', 'name channels samples sample_rate stimulus_index')
ModalityShape.__new__.__defaults__ = (0,)
ModalityShape.__doc__ = "Shape shared by every trial segment of one modality (channels x samples)."

TrialSegment = namedtuple('TrialSegment', 'data condition')
TrialSegment.__doc__ = "One channels x samples matrix with its congruency tag."

Standardizer = namedtuple('Standardizer', 'modality channel_scales channel_offsets')
Standardizer.__doc__ = "Per-channel centering offsets and scales fit on a training pool."


def _parse_condition(value, where):
    try:
        return Condition(value)
    except ValueError:
        raise MissingCondition(f"{where}: condition {value!r} is not one of 'C'/'I'")


class Session(object):

    def __init__(self, participant_id, label, conditions, trials):
        self.participant_id = str(participant_id)
        self.label = None if label is None else int(label)
        self.conditions = tuple(_parse_condition(c, f"session {participant_id}") for c in conditions)
        self.trials = {}
        for modality, x in trials.items():
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 3:
                raise ShapeMismatch(f"session {participant_id}: {modality} tensor has {x.ndim} dims, expected 3")
            if x.shape[0] != len(self.conditions):
                raise ConditionLengthMismatch(
                    f"session {participant_id}: {modality} has {x.shape[0]} trials but "
                    f"{len(self.conditions)} conditions")
            self.trials[modality] = x

    @property
    def trial_count(self):
        return len(self.conditions)

    @property
    def signs(self):
        return np.array([c.sign for c in self.conditions], dtype=np.float64)

    def segment(self, modality, t):
        if modality not in self.trials:
            raise ModalityMismatch(f"session {self.participant_id} has no {modality!r} segments")
        return TrialSegment(self.trials[modality][t], self.conditions[t])

    def with_trials(self, trials):
        return Session(self.participant_id, self.label, [c.value for c in self.conditions], trials)

    def with_label(self, label):
        return Session(self.participant_id, label, [c.value for c in self.conditions], self.trials)

    def __repr__(self):
        return f"Session({self.participant_id!r}, label={self.label}, T={self.trial_count}, " \
               f"modalities={sorted(self.trials)})"


class Dataset(object):

    def __init__(self, name, modalities, sessions, leadfield_path=None):
        self.name = name
        self.modalities = [ModalityShape(*m) for m in modalities]
        self.sessions = list(sessions)
        self.leadfield_path = leadfield_path
        ids = [s.participant_id for s in self.sessions]
        if len(set(ids)) != len(ids):
            raise DataError(f"dataset {name!r}: duplicate participant ids")
        for s in self.sessions:
            for shape in self.modalities:
                x = s.trials.get(shape.name)
                if x is not None and x.shape[1:] != (shape.channels, shape.samples):
                    raise ShapeMismatch(
                        f"session {s.participant_id}: {shape.name} segments are {x.shape[1]}x{x.shape[2]}, "
                        f"expected {shape.channels}x{shape.samples}")

    def modality(self, name):
        for m in self.modalities:
            if m.name == name:
                return m
        raise ModalityMismatch(f"dataset {self.name!r} has no modality {name!r}")

    @property
    def participant_ids(self):
        return [s.participant_id for s in self.sessions]

    @property
    def labels(self):
        return np.array([s.label for s in self.sessions])

    def labels_by_participant(self):
        return {s.participant_id: s.label for s in self.sessions}

    def session(self, participant_id):
        for s in self.sessions:
            if s.participant_id == participant_id:
                return s
        raise KeyError(participant_id)

    def subset(self, participant_ids):
        keep = set(participant_ids)
        return self.replace_sessions([s for s in self.sessions if s.participant_id in keep])

    def replace_sessions(self, sessions):
        return Dataset(self.name, self.modalities, sessions, self.leadfield_path)

    def __len__(self):
        return len(self.sessions)


def write_tensor(path, dims, values):
    dims = tuple(int(d) for d in dims)
    if not dims or len(dims) > tensorfile.MAX_NDIM or min(dims) < 1:
        raise ShapeMismatch(f"{path}: invalid dims {dims}")
    values = np.asarray(values)
    if values.size != int(np.prod(dims)):
        raise ShapeMismatch(f"{path}: {values.size} values for dims {dims}")
    payload = np.ascontiguousarray(values.reshape(dims), dtype=tensorfile.DTYPES[0])
    with open(path, "wb") as f:
        f.write(tensorfile.pack_header(dims, 0))
        f.write(payload.tobytes(order="C"))


def read_tensor(path):
    """
    Returns:
        (dims, values): dims tuple and a float32 array of that shape
    """
    if not os.path.exists(path):
        raise MissingFile(f"tensor file {path} does not exist")
    with open(path, "rb") as f:
        buffer = f.read()
    if len(buffer) < tensorfile.HEADER.size:
        raise TruncatedPayload(f"{path}: {len(buffer)} bytes is shorter than the header")
    magic, version, dtype_code, ndim = tensorfile.unpack_header(buffer)
    if magic != tensorfile.MAGIC:
        raise BadMagic(f"{path}: magic {magic!r}, expected {tensorfile.MAGIC!r}")
    if version != tensorfile.VERSION:
        raise UnsupportedVersion(f"{path}: version {version}")
    if dtype_code not in tensorfile.DTYPES:
        raise DtypeMismatch(f"{path}: dtype code {dtype_code}")
    if not 1 <= ndim <= tensorfile.MAX_NDIM:
        raise ShapeMismatch(f"{path}: ndim {ndim}")
    offset = tensorfile.header_size(ndim)
    if len(buffer) < offset:
        raise TruncatedPayload(f"{path}: header declares {ndim} dims but the file ends early")
    dims = tensorfile.unpack_dims(buffer, ndim)
    dtype = tensorfile.DTYPES[dtype_code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(buffer) - offset != expected:
        raise TruncatedPayload(f"{path}: payload has {len(buffer) - offset} bytes, expected {expected}")
    values = np.frombuffer(buffer, dtype=dtype, offset=offset).reshape(dims)
    return dims, values.copy()


def _manifest_file(path):
    if os.path.isdir(path):
        return os.path.join(path, config.MANIFEST_NAME)
    return path


def load_dataset(manifest_path, labeled=True):
    manifest_path = _manifest_file(manifest_path)
    if not os.path.exists(manifest_path):
        raise MissingFile(f"manifest {manifest_path} does not exist")
    root = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path) as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict) or "modalities" not in doc or "sessions" not in doc:
        raise DataError(f"{manifest_path}: manifest needs 'modalities' and 'sessions'")

    modalities = []
    for m in doc["modalities"]:
        modalities.append(ModalityShape(str(m["name"]), int(m["channels"]), int(m["samples"]),
                                        float(m.get("sample_rate", 1.0)), int(m.get("stimulus_index", 0))))
        if modalities[-1].channels < 1 or modalities[-1].samples < 1:
            raise ShapeMismatch(f"{manifest_path}: modality {m['name']} has an empty shape")
    shapes = {m.name: m for m in modalities}

    sessions = []
    for record in doc["sessions"]:
        pid = str(record["participant_id"])
        label = record.get("label")
        if label is None and labeled:
            raise LabelMissing(f"{manifest_path}: session {pid} has no label")
        if label is not None and int(label) not in (0, 1):
            raise DataError(f"{manifest_path}: session {pid} label {label!r} is not binary")
        conditions = record.get("conditions")
        if not conditions:
            raise MissingCondition(f"{manifest_path}: session {pid} has no condition sequence")
        trials = {}
        for modality, rel in record.get("tensors", {}).items():
            if modality not in shapes:
                raise ModalityMismatch(f"{manifest_path}: session {pid} references unknown modality {modality!r}")
            dims, values = read_tensor(os.path.join(root, rel))
            shape = shapes[modality]
            if len(dims) != 3 or dims[1:] != (shape.channels, shape.samples):
                raise ShapeMismatch(f"{rel}: dims {dims}, expected (T, {shape.channels}, {shape.samples})")
            if dims[0] != len(conditions):
                raise ConditionLengthMismatch(
                    f"session {pid}: {modality} has {dims[0]} trials, condition sequence has {len(conditions)}")
            trials[modality] = values
        sessions.append(Session(pid, label, conditions, trials))

    leadfield = doc.get("leadfield")
    if leadfield is not None:
        leadfield = os.path.normpath(os.path.join(root, leadfield))
    return Dataset(doc.get("name", os.path.basename(root)), modalities, sessions, leadfield)


def save_dataset(dataset, directory, leadfield_relpath=None):
    """Writes one tensor per (session, modality) plus the manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    records = []
    for s in dataset.sessions:
        tensors = {}
        for modality in sorted(s.trials):
            rel = f"{s.participant_id}_{modality}{config.TENSOR_SUFFIX}"
            write_tensor(os.path.join(directory, rel), s.trials[modality].shape, s.trials[modality])
            tensors[modality] = rel
        records.append({
            "participant_id": s.participant_id,
            "label": s.label,
            "conditions": [c.value for c in s.conditions],
            "tensors": tensors,
        })
    doc = {
        "name": dataset.name,
        "modalities": [{"name": m.name, "channels": m.channels, "samples": m.samples,
                        "sample_rate": m.sample_rate, "stimulus_index": m.stimulus_index}
                       for m in dataset.modalities],
        "sessions": records,
    }
    if leadfield_relpath is not None:
        doc["leadfield"] = leadfield_relpath
    path = os.path.join(directory, config.MANIFEST_NAME)
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)
    return path


def fit_standardizer(train_sessions, modality):
    blocks = [s.trials[modality] for s in train_sessions if modality in s.trials and s.trial_count > 0]
    if not blocks:
        raise InsufficientSamples(f"no training trials for modality {modality!r}")
    # channels x (trials * samples)
    pooled = np.concatenate([b.transpose(1, 0, 2).reshape(b.shape[1], -1) for b in blocks], axis=1)
    offsets = pooled.mean(axis=1)
    sd = pooled.std(axis=1)
    for c, v in enumerate(sd):
        if not np.isfinite(v) or v <= 0:
            raise ZeroVariance(modality, c)
    return Standardizer(modality, 1.0 / sd, offsets)


def apply_standardizer(std, session):
    trials = dict(session.trials)
    x = trials[std.modality]
    trials[std.modality] = (x - std.channel_offsets[None, :, None]) * std.channel_scales[None, :, None]
    return session.with_trials(trials)


def fit_standardizers(train_sessions, modalities):
    return {m: fit_standardizer(train_sessions, m) for m in modalities}


def apply_standardizers(standardizers, session):
    for std in standardizers.values():
        session = apply_standardizer(std, session)
    return session


def standardize_dataset(standardizers, dataset):
    return dataset.replace_sessions([apply_standardizers(standardizers, s) for s in dataset.sessions])
