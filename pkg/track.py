"""
Results of a cross-validated experiment: one record per (configuration, repeat, fold) and
the per-configuration summaries built from them with the corrected resampled statistics.
"""
import math
import os
from collections import OrderedDict, namedtuple

import numpy as np
import pandas as pd

from errors import DataError
from evaluation import (CVConfig, MetricSet, bh_fdr, confusion_metrics, corrected_ci, corrected_paired_ttest,
                        corrected_ttest, mdes, roc_points)
from utils import dump_json, load_json, log

SUMMARY_COLUMNS = ["configuration", "method", "mode", "modalities", "folds", "failed", "auc_mean", "auc_sd",
                   "ci_low", "ci_high", "t", "p", "p_bh", "significant", "sensitivity", "specificity",
                   "pooled_sensitivity", "pooled_specificity", "brier", "cross_entropy", "mdes"]


def configuration_key(method, mode, modalities):
    if method == "usbl":
        return f"usbl/{'+'.join(modalities)}"
    if method == "dscore":
        return "dscore"
    return f"{method}-{mode}/{'+'.join(modalities)}"


class FoldRecord(namedtuple('FoldRecord', 'method modalities mode repeat fold n_train n_test metrics '
                                          'calibrated_metrics omega predictions error')):
    """
    predictions: [participant_id, probability, label] rows, with the calibrated probability
    appended when the fold was calibrated. A failed fold has `error` set and no metrics.
    """

    @classmethod
    def failed(cls, spec, fold, error):
        return cls(spec.name, list(spec.modalities), spec.mode, fold.repeat, fold.fold, len(fold.train_ids),
                   len(fold.test_ids), None, None, None, [], error)

    @property
    def key(self):
        return configuration_key(self.method, self.mode, self.modalities)

    @property
    def auc(self):
        return float("nan") if self.metrics is None else self.metrics.auc

    def to_dict(self):
        d = self._asdict()
        d["metrics"] = None if self.metrics is None else dict(self.metrics._asdict())
        d["calibrated_metrics"] = None if self.calibrated_metrics is None else dict(self.calibrated_metrics._asdict())
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("metrics", "calibrated_metrics"):
            d[k] = None if d.get(k) is None else MetricSet(**d[k])
        return cls(**d)


def _mean(values):
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    return float(values.mean()) if values.size else float("nan")


class ResultsTable(object):

    def __init__(self, records, cv_config, n1, n2, meta=None):
        self.records = sorted(records, key=lambda r: (r.key, r.repeat, r.fold))
        self.cv = cv_config
        self.n1 = float(n1)
        self.n2 = float(n2)
        self.meta = meta or {}

    def configurations(self):
        return list(OrderedDict((r.key, None) for r in self.records))

    def records_for(self, key):
        records = [r for r in self.records if r.key == key]
        if not records:
            raise DataError(f"no configuration {key!r} in results; have {self.configurations()}")
        return records

    def fold_aucs(self, key):
        return np.array([r.auc for r in self.records_for(key)])

    def pooled_predictions(self, key, calibrated=False):
        rows = [p for r in self.records_for(key) for p in r.predictions]
        column = 3 if calibrated else 1
        return np.array([p[column] for p in rows]), np.array([p[2] for p in rows])

    def _summary_row(self, key):
        records = self.records_for(key)
        ok = [r for r in records if r.metrics is not None]
        aucs = np.array([r.auc for r in records])
        k, r = self.cv.k, self.cv.r
        test = corrected_ttest(aucs, k, r, self.n1, self.n2)
        low, high = corrected_ci(aucs, k, r, self.n1, self.n2)
        finite = aucs[np.isfinite(aucs)]
        sd = float(np.std(finite, ddof=1)) if finite.size > 1 else float("nan")
        probs, labels = self.pooled_predictions(key)
        pooled_sens, pooled_spec = confusion_metrics(probs, labels) if probs.size else (math.nan, math.nan)
        row = OrderedDict([
            ("configuration", key), ("method", records[0].method), ("mode", records[0].mode),
            ("modalities", "+".join(records[0].modalities)), ("folds", len(ok)), ("failed", len(records) - len(ok)),
            ("auc_mean", _mean(aucs)), ("auc_sd", sd), ("ci_low", low), ("ci_high", high),
            ("t", test.t), ("p", test.p), ("p_bh", math.nan), ("significant", False),
            ("sensitivity", _mean([x.metrics.sensitivity for x in ok])),
            ("specificity", _mean([x.metrics.specificity for x in ok])),
            ("pooled_sensitivity", pooled_sens), ("pooled_specificity", pooled_spec),
            ("brier", _mean([x.metrics.brier for x in ok])),
            ("cross_entropy", _mean([x.metrics.cross_entropy for x in ok])),
            ("mdes", mdes(sd, k, r, self.n1, self.n2) if np.isfinite(sd) else math.nan),
        ])
        calibrated = [x for x in ok if x.calibrated_metrics is not None]
        if calibrated:
            row["brier_calibrated"] = _mean([x.calibrated_metrics.brier for x in calibrated])
            row["cross_entropy_calibrated"] = _mean([x.calibrated_metrics.cross_entropy for x in calibrated])
            row["omega_median"] = float(np.median([x.omega for x in calibrated]))
        return row

    def summary(self):
        """One row per configuration; BH-FDR runs across all configurations of the table."""
        rows = [self._summary_row(key) for key in self.configurations()]
        frame = pd.DataFrame(rows)
        if frame.empty:
            return pd.DataFrame(columns=SUMMARY_COLUMNS)
        rejected, adjusted = bh_fdr(frame["p"].to_numpy())
        frame["p_bh"] = adjusted
        frame["significant"] = rejected
        return frame

    def fold_frame(self):
        return pd.DataFrame([OrderedDict([
            ("configuration", r.key), ("repeat", r.repeat), ("fold", r.fold), ("n_train", r.n_train),
            ("n_test", r.n_test), ("auc", r.auc),
            ("sensitivity", r.metrics.sensitivity if r.metrics else math.nan),
            ("specificity", r.metrics.specificity if r.metrics else math.nan),
            ("brier", r.metrics.brier if r.metrics else math.nan),
            ("cross_entropy", r.metrics.cross_entropy if r.metrics else math.nan),
            ("omega", math.nan if r.omega is None else r.omega), ("error", r.error or ""),
        ]) for r in self.records])

    def to_document(self):
        summary = self.summary()
        return {
            "cv": dict(self.cv._asdict()),
            "n1": self.n1,
            "n2": self.n2,
            "meta": self.meta,
            "folds": [r.to_dict() for r in self.records],
            "summary": [{k: (v.item() if hasattr(v, "item") else v) for k, v in row.items()}
                        for row in summary.to_dict(orient="records")],
        }

    def write(self, path):
        """Results document (JSON) plus a per-fold CSV next to it."""
        dump_json(self.to_document(), path)
        stem, _ = os.path.splitext(path)
        self.fold_frame().to_csv(stem + ".folds.csv", index=False, float_format="%.10g")

    @classmethod
    def from_document(cls, doc):
        try:
            cv = CVConfig(**doc["cv"])
            records = [FoldRecord.from_dict(r) for r in doc["folds"]]
            return cls(records, cv, doc["n1"], doc["n2"], doc.get("meta"))
        except (KeyError, TypeError) as e:
            raise DataError(f"results document is malformed: {e}")

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            raise DataError(f"results document {path} does not exist")
        return cls.from_document(load_json(path))

    def render(self, fmt="text"):
        frame = self.summary()
        if fmt == "csv":
            return frame.to_csv(index=False, float_format="%.6g")
        if fmt != "text":
            raise ValueError(f"unknown report format {fmt!r}")
        table = pd.DataFrame(OrderedDict([
            ("method", frame["configuration"]),
            ("AUC", [f"{m:.3f} ± {s:.3f} [{lo:.3f}, {hi:.3f}]"
                     for m, s, lo, hi in zip(frame["auc_mean"], frame["auc_sd"], frame["ci_low"], frame["ci_high"])]),
            ("sens", frame["sensitivity"].map("{:.3f}".format)),
            ("spec", frame["specificity"].map("{:.3f}".format)),
            ("p_BH", frame["p_bh"].map("{:.4f}".format)),
            ("MDES", frame["mdes"].map("{:.3f}".format)),
        ]))
        if "brier_calibrated" in frame:
            table["Brier (cal)"] = [f"{b:.3f} ({c:.3f})" for b, c in zip(frame["brier"], frame["brier_calibrated"])]
        return table.to_string(index=False)

    def roc(self, path):
        rows = []
        for key in self.configurations():
            probs, labels = self.pooled_predictions(key)
            if probs.size == 0 or len(np.unique(labels)) < 2:
                log(f"ROC: {key} has no pooled predictions with both classes", level="warning")
                continue
            rows.extend((key, t, s, sp) for t, s, sp in roc_points(probs, labels))
        frame = pd.DataFrame(rows, columns=["configuration", "threshold", "sensitivity", "specificity"])
        frame.to_csv(path, index=False, float_format="%.10g")
        return frame

    def compare(self, a, b):
        """Corrected paired t-test on fold-wise AUC differences a - b."""
        ra = {(r.repeat, r.fold): r.auc for r in self.records_for(a)}
        rb = {(r.repeat, r.fold): r.auc for r in self.records_for(b)}
        keys = sorted(set(ra) | set(rb))
        return corrected_paired_ttest([ra.get(k, math.nan) for k in keys], [rb.get(k, math.nan) for k in keys],
                                      self.cv.k, self.cv.r, self.n1, self.n2)

    def write_metrics(self, logfile=None):
        log("######## CROSS-VALIDATION #########", logfile)
        log(f"{self.cv.r} x {self.cv.k} folds, seed {self.cv.seed}, n1 {self.n1:.1f}, n2 {self.n2:.1f}", logfile)
        log("######## SUMMARY #########", logfile)
        log(self.render("text"), logfile)
        failed = [r for r in self.records if r.error]
        if failed:
            log(f"{len(failed)} fold(s) failed, first: {failed[0].key} "
                f"repeat {failed[0].repeat} fold {failed[0].fold}: {failed[0].error}", logfile, level="warning")
