import filecmp
import json
import os
import unittest
from tempfile import TemporaryDirectory
from unittest import mock

import numpy as np
import yaml

import config
from errors import ConfigError
from run import main, resolve_run_config


class ResolveConfigTest(unittest.TestCase):

    def test_precedence(self):
        with TemporaryDirectory() as d:
            path = os.path.join(d, "run.yaml")
            with open(path, "w") as f:
                yaml.safe_dump({"seed": 3, "cv": {"folds": 4}}, f)
            resolved = resolve_run_config(path, **{"seed": 9, "cv.repeats": 2, "jobs": None})
        self.assertEqual(resolved["seed"], 9)
        self.assertEqual(resolved["cv"]["folds"], 4)
        self.assertEqual(resolved["cv"]["repeats"], 2)
        self.assertEqual(resolved["jobs"], 1)

    def test_priors_are_free_form(self):
        with TemporaryDirectory() as d:
            path = os.path.join(d, "run.yaml")
            with open(path, "w") as f:
                yaml.safe_dump({"model": {"priors": {"gaze": "horseshoe"}}}, f)
            self.assertEqual(resolve_run_config(path)["model"]["priors"], {"gaze": "horseshoe"})

    def test_unknown_key(self):
        with TemporaryDirectory() as d:
            path = os.path.join(d, "run.yaml")
            with open(path, "w") as f:
                yaml.safe_dump({"cv": {"fold": 4}}, f)
            with self.assertRaises(ConfigError):
                resolve_run_config(path)


class ExitCodeTest(unittest.TestCase):

    def test_unknown_flag(self):
        self.assertEqual(main(["eval", "--no-such-flag"]), config.EXIT_USAGE)

    def test_unknown_config_key(self):
        with TemporaryDirectory() as d:
            path = os.path.join(d, "run.yaml")
            with open(path, "w") as f:
                yaml.safe_dump({"not_a_key": 1}, f)
            code = main(["eval", "--config", path, "--data", d, "--out", os.path.join(d, "r.json")])
        self.assertEqual(code, config.EXIT_USAGE)

    def test_predict_reads_config(self):
        with TemporaryDirectory() as d:
            path = os.path.join(d, "run.yaml")
            with open(path, "w") as f:
                yaml.safe_dump({"not_a_key": 1}, f)
            code = main(["predict", "--config", path, "--data", d, "--model", d, "--out", os.path.join(d, "p.json")])
        self.assertEqual(code, config.EXIT_USAGE)

    def test_linear_algebra_failure_is_numerical(self):
        with mock.patch("run._load", return_value=None), \
                mock.patch("synth.kish_deff", side_effect=np.linalg.LinAlgError("singular matrix")):
            self.assertEqual(main(["deff", "--data", "anywhere"]), config.EXIT_NUMERICAL)

    def test_missing_dataset(self):
        with TemporaryDirectory() as d:
            code = main(["eval", "--data", os.path.join(d, "nowhere"), "--out", os.path.join(d, "r.json")])
        self.assertEqual(code, config.EXIT_DATA)


class PipelineTest(unittest.TestCase):

    def simulate(self, d):
        cohort = os.path.join(d, "cohort")
        code = main(["simulate", "--out", cohort, "--seed", "4", "--participants", "10", "--blocks", "2",
                     "--trials-per-block", "3", "--effect-size", "1.0"])
        self.assertEqual(code, config.EXIT_OK)
        return cohort

    def evaluate(self, cohort, out, jobs):
        return main(["eval", "--data", cohort, "--out", out, "--method", "dscore", "--method", "slda",
                     "--modalities", "gaze", "--folds", "5", "--repeats", "2", "--jobs", str(jobs)])

    def test_simulate_eval_report(self):
        with TemporaryDirectory() as d:
            cohort = self.simulate(d)
            self.assertTrue(os.path.exists(os.path.join(cohort, config.MANIFEST_NAME)))
            a, b = os.path.join(d, "a.json"), os.path.join(d, "b.json")
            self.assertEqual(self.evaluate(cohort, a, 1), config.EXIT_OK)
            self.assertEqual(self.evaluate(cohort, b, 2), config.EXIT_OK)
            self.assertTrue(filecmp.cmp(a, b, shallow=False))
            self.assertTrue(filecmp.cmp(os.path.join(d, "a.folds.csv"), os.path.join(d, "b.folds.csv"),
                                        shallow=False))
            with open(a) as f:
                doc = json.load(f)
            self.assertEqual(len(doc["folds"]), 20)
            self.assertEqual({row["configuration"] for row in doc["summary"]}, {"dscore", "slda-recoded/gaze"})
            self.assertTrue(os.path.exists(os.path.join(d, "a.config.yaml")))

            roc = os.path.join(d, "roc.csv")
            code = main(["report", a, "--format", "csv", "--roc", roc, "--compare", "slda-recoded/gaze", "dscore"])
            self.assertEqual(code, config.EXIT_OK)
            self.assertTrue(os.path.exists(roc))
            self.assertEqual(main(["report", a, "--compare", "eegnet", "dscore"]), config.EXIT_DATA)

    def test_dscore_and_deff(self):
        with TemporaryDirectory() as d:
            cohort = self.simulate(d)
            out = os.path.join(d, "dscore.json")
            self.assertEqual(main(["dscore", "--data", cohort, "--out", out]), config.EXIT_OK)
            with open(out) as f:
                doc = json.load(f)
            self.assertEqual(len(doc["sessions"]), 10)
            deff = os.path.join(d, "deff.json")
            self.assertEqual(main(["deff", "--data", cohort, "--modality", "gaze", "--out", deff]), config.EXIT_OK)
            with open(deff) as f:
                self.assertGreaterEqual(json.load(f)["deff"], 1.0 - 1e-9)
