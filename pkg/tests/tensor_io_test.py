import os
import unittest
from tempfile import TemporaryDirectory

import numpy as np
import yaml

from errors import (BadMagic, ConditionLengthMismatch, DtypeMismatch, LabelMissing, MissingCondition, MissingFile,
                    ShapeMismatch, TruncatedPayload, ZeroVariance)
from frozen import tensorfile
from tensor_io import (Condition, Session, apply_standardizer, fit_standardizer, load_dataset, read_tensor,
                       save_dataset, write_tensor)
from tests.cohorts import toy_dataset


class TensorFileTest(unittest.TestCase):

    def test_write_read(self):
        values = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 7.0
        with TemporaryDirectory() as d:
            path = os.path.join(d, "x.usbl")
            write_tensor(path, values.shape, values)
            dims, loaded = read_tensor(path)
        self.assertEqual(dims, (2, 3, 4))
        self.assertEqual(loaded.dtype, np.float32)
        np.testing.assert_array_equal(loaded, values.astype(np.float32))

    def test_header_layout(self):
        with TemporaryDirectory() as d:
            path = os.path.join(d, "x.usbl")
            write_tensor(path, (3,), [1.0, 2.0, 3.0])
            with open(path, "rb") as f:
                raw = f.read()
        self.assertEqual(raw[:4], b"USBL")
        self.assertEqual(len(raw), tensorfile.header_size(1) + 3 * 4)

    def test_bad_magic(self):
        with TemporaryDirectory() as d:
            path = os.path.join(d, "x.usbl")
            write_tensor(path, (2,), [1.0, 2.0])
            with open(path, "r+b") as f:
                f.write(b"XXXX")
            with self.assertRaises(BadMagic):
                read_tensor(path)

    def test_truncated(self):
        with TemporaryDirectory() as d:
            path = os.path.join(d, "x.usbl")
            write_tensor(path, (4,), np.ones(4))
            with open(path, "rb") as f:
                raw = f.read()
            with open(path, "wb") as f:
                f.write(raw[:-2])
            with self.assertRaises(TruncatedPayload):
                read_tensor(path)

    def test_unknown_dtype(self):
        with TemporaryDirectory() as d:
            path = os.path.join(d, "x.usbl")
            with open(path, "wb") as f:
                f.write(tensorfile.pack_header((2,), 7) + np.ones(2, dtype="<f4").tobytes())
            with self.assertRaises(DtypeMismatch):
                read_tensor(path)

    def test_missing_file(self):
        with self.assertRaises(MissingFile):
            read_tensor("/nonexistent/x.usbl")

    def test_bad_dims(self):
        with TemporaryDirectory() as d:
            with self.assertRaises(ShapeMismatch):
                write_tensor(os.path.join(d, "x.usbl"), (2, 2), np.ones(3))


class SessionTest(unittest.TestCase):

    def test_condition_sign(self):
        self.assertEqual(Condition("I").sign, 1)
        self.assertEqual(Condition("C").sign, -1)

    def test_condition_length(self):
        with self.assertRaises(ConditionLengthMismatch):
            Session("p", 1, ["C", "I"], {"eeg": np.zeros((3, 2, 2))})

    def test_unknown_condition(self):
        with self.assertRaises(MissingCondition):
            Session("p", 1, ["C", "X"], {"eeg": np.zeros((2, 2, 2))})


class DatasetFilesTest(unittest.TestCase):

    def test_save_load(self):
        dataset = toy_dataset(n=4)
        with TemporaryDirectory() as d:
            manifest = save_dataset(dataset, d)
            loaded = load_dataset(manifest)
        self.assertEqual(loaded.participant_ids, dataset.participant_ids)
        np.testing.assert_array_equal(loaded.labels, dataset.labels)
        for a, b in zip(dataset.sessions, loaded.sessions):
            self.assertEqual(a.conditions, b.conditions)
            np.testing.assert_array_equal(b.trials["fau"], a.trials["fau"].astype(np.float32))
        self.assertEqual(loaded.modality("fau").channels, 4)

    def test_label_missing(self):
        dataset = toy_dataset(n=2)
        with TemporaryDirectory() as d:
            manifest = save_dataset(dataset, d)
            with open(manifest) as f:
                doc = yaml.safe_load(f)
            doc["sessions"][0]["label"] = None
            with open(manifest, "w") as f:
                yaml.safe_dump(doc, f)
            with self.assertRaises(LabelMissing):
                load_dataset(d)
            unlabeled = load_dataset(d, labeled=False)
        self.assertIsNone(unlabeled.sessions[0].label)


class StandardizerTest(unittest.TestCase):

    def test_pooled_scales(self):
        dataset = toy_dataset(n=4)
        std = fit_standardizer(dataset.sessions, "fau")
        pooled = np.concatenate([apply_standardizer(std, s).trials["fau"] for s in dataset.sessions])
        np.testing.assert_allclose(pooled.mean(axis=(0, 2)), 0.0, atol=1e-12)
        np.testing.assert_allclose(pooled.std(axis=(0, 2)), 1.0, atol=1e-12)

    def test_zero_variance(self):
        dataset = toy_dataset(n=3)
        sessions = []
        for s in dataset.sessions:
            trials = dict(s.trials)
            x = trials["fau"].copy()
            x[:, 2, :] = 5.0
            trials["fau"] = x
            sessions.append(s.with_trials(trials))
        with self.assertRaises(ZeroVariance) as ctx:
            fit_standardizer(sessions, "fau")
        self.assertEqual(ctx.exception.channel, 2)
