"""Dataset splitting, classification metrics, coverage, and report files.

Binary metrics take the anomaly-vs-nominal view: any non-Nominal prediction
or label counts as positive. The full multiclass confusion matrix is kept
alongside for detail.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conformal import ConformalPredictor, predict_set
from .core import Dataset, FaultClass, PmDiagError, atomic_write_text
from .model import MlpModel, forward

N_CLASSES = len(FaultClass)


class ClassTooSmallError(PmDiagError):
    """A class has too few members to split."""


class TestTooSmallError(PmDiagError):
    """The test set is too small to split into calibration and holdout."""


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    calibration_frac_of_test: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_frac < 1:
            raise ValueError("train_frac must be in (0, 1)")
        if not 0 < self.calibration_frac_of_test < 1:
            raise ValueError("calibration_frac_of_test must be in (0, 1)")

    def to_obj(self) -> dict:
        return {
            "train_frac": self.train_frac,
            "calibration_frac_of_test": self.calibration_frac_of_test,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    fpr: float
    fnr: float
    confusion: tuple[tuple[int, ...], ...]
    coverage: float
    mean_set_size: float
    per_class: dict

    def to_obj(self) -> dict:
        return {
            "precision": self.precision,
            "fpr": self.fpr,
            "fnr": self.fnr,
            "confusion": [list(row) for row in self.confusion],
            "coverage": self.coverage,
            "mean_set_size": self.mean_set_size,
            "per_class": self.per_class,
        }


def _grouped_indices(ds: Dataset) -> "dict[FaultClass, list[int]]":
    groups: dict[FaultClass, list[int]] = {}
    for i, m in enumerate(ds):
        if m.label is None:
            raise ValueError(f"manoeuvre {m.id!r} is unlabelled; splits need labels")
        groups.setdefault(m.label, []).append(i)
    return groups


def _take_split(
    ds: Dataset, frac: float, rng: np.random.Generator, min_per_class: int
) -> tuple[set[int], set[int]]:
    groups = _grouped_indices(ds)
    first: set[int] = set()
    second: set[int] = set()
    for cls in sorted(groups, key=int):
        idx = groups[cls]
        if len(idx) < min_per_class:
            raise ClassTooSmallError(f"class {cls.name} has only {len(idx)} members")
        perm = rng.permutation(len(idx))
        n_first = math.floor(len(idx) * frac)
        first.update(idx[j] for j in perm[:n_first])
        second.update(idx[j] for j in perm[n_first:])
    return first, second


def _subset(ds: Dataset, keep: "set[int]", tag: str) -> Dataset:
    kept = tuple(m for i, m in enumerate(ds) if i in keep)
    return Dataset(manoeuvres=kept, provenance=f"{ds.provenance}:{tag}")


def stratified_split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Per-label seeded split: floor(n_c * train_frac) to train, rest to test."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    train_idx, test_idx = _take_split(ds, spec.train_frac, rng, min_per_class=2)
    return _subset(ds, train_idx, "train"), _subset(ds, test_idx, "test")


def split_calibration(test: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Stratified seeded split of the test set into calibration and holdout."""
    if len(test) < 4:
        raise TestTooSmallError(f"test set has only {len(test)} manoeuvres")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(1,)))
    cal_idx, hold_idx = _take_split(
        test, spec.calibration_frac_of_test, rng, min_per_class=1
    )
    return _subset(test, cal_idx, "calibration"), _subset(test, hold_idx, "holdout")


def binary_metrics(predictions) -> tuple[float, float, float]:
    """(precision, fpr, fnr) under the anomaly-vs-nominal view.

    `predictions` is a sequence of (predicted, true) FaultClass pairs.
    Precision is 1.0 when nothing is predicted positive; FPR and FNR are 0
    when their denominators are empty.
    """
    pairs = list(predictions)
    if not pairs:
        raise ValueError("predictions must be nonempty")
    tp = fp = tn = fn = 0
    for predicted, true in pairs:
        pred_pos = predicted != FaultClass.Nominal
        true_pos = true != FaultClass.Nominal
        if pred_pos and true_pos:
            tp += 1
        elif pred_pos:
            fp += 1
        elif true_pos:
            fn += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if tp + fp > 0 else 1.0
    fpr = fp / (fp + tn) if fp + tn > 0 else 0.0
    fnr = fn / (fn + tp) if fn + tp > 0 else 0.0
    return precision, fpr, fnr


def confusion_matrix(predictions) -> np.ndarray:
    """5x5 count matrix, rows true class, columns predicted class."""
    conf = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for predicted, true in predictions:
        conf[int(true), int(predicted)] += 1
    return conf


def per_class_metrics(conf: np.ndarray) -> dict:
    """Per-class precision/recall; empty denominators report 1.0."""
    out = {}
    for cls in FaultClass:
        col = int(conf[:, int(cls)].sum())
        row = int(conf[int(cls), :].sum())
        diag = int(conf[int(cls), int(cls)])
        out[cls.name] = {
            "precision": diag / col if col > 0 else 1.0,
            "recall": diag / row if row > 0 else 1.0,
            "support": row,
        }
    return out


def coverage_eval(
    predictor: ConformalPredictor, model: MlpModel, holdout
) -> tuple[float, float]:
    """Empirical coverage and mean set size over labelled holdout features.

    `holdout` is a sequence of (FeatureVector, FaultClass) pairs.
    """
    items = list(holdout)
    if not items:
        raise ValueError("holdout must be nonempty")
    covered = 0
    sizes = 0
    for fv, label in items:
        ps = predict_set(predictor, forward(model, fv.values))
        classes = {cls for cls, _ in ps.members}
        covered += label in classes
        sizes += len(classes)
    return covered / len(items), sizes / len(items)


def build_metrics(predictions, coverage: float, mean_set_size: float) -> MetricsReport:
    precision, fpr, fnr = binary_metrics(predictions)
    conf = confusion_matrix(predictions)
    return MetricsReport(
        precision=precision,
        fpr=fpr,
        fnr=fnr,
        confusion=tuple(tuple(int(v) for v in row) for row in conf),
        coverage=coverage,
        mean_set_size=mean_set_size,
        per_class=per_class_metrics(conf),
    )


def write_report(report_obj: dict, path: str | Path) -> None:
    """Write report.json with stable key order (byte-identical reruns)."""
    atomic_write_text(path, json.dumps(report_obj, sort_keys=True, indent=2) + "\n")


def write_diagnoses_csv(rows, path: str | Path) -> None:
    """One row per holdout manoeuvre: id, true label, argmax, set, probs.

    `rows` is a sequence of (true_label or None, Diagnosis). Set members and
    their probabilities are pipe-joined in descending-probability order.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "true_label", "argmax", "set", "probs"])
    for true_label, diag in rows:
        writer.writerow(
            [
                diag.source_id,
                true_label.name if true_label is not None else "",
                diag.argmax_class.name,
                "|".join(cls.name for cls, _ in diag.prediction_set),
                "|".join(repr(prob) for _, prob in diag.prediction_set),
            ]
        )
    atomic_write_text(path, buf.getvalue())
