"""Split-conformal calibration and adaptive prediction sets.

The conformity score of a labelled example is the cumulative probability
mass, over classes sorted by descending predicted probability, through and
including the true class. Calibration takes the finite-sample-corrected
quantile of those scores; prediction sets then accumulate classes until that
threshold is reached. Over exchangeable data the true class lands inside the
set with probability at least 1 - alpha.

The set-level guarantee is the thing to report to an operator: it is the
long-run fraction of sets containing the truth, not the probability that any
single prediction is correct. Per-class softmax probabilities are reported
alongside for ranking within the set, not as calibrated correctness odds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DatasetIoError, FaultClass, PmDiagError, atomic_write_text
from .model import MlpModel, forward, model_digest

PROB_SUM_TOL = 1e-9


class BadDistributionError(PmDiagError):
    """Probability vector has a negative entry or does not sum to one."""


class EmptyCalibrationError(PmDiagError):
    """Calibration requires at least one labelled example."""


class DigestMismatchError(PmDiagError):
    """Predictor was calibrated against a different model."""


@dataclass(frozen=True)
class ConformalPredictor:
    """Calibrated threshold for building prediction sets at risk level alpha."""

    alpha: float
    qhat: float
    n_calibration: int
    model_digest: str

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if not 0 < self.qhat <= 1:
            raise ValueError("qhat must be in (0, 1]")
        if self.n_calibration < 1:
            raise ValueError("n_calibration must be >= 1")


@dataclass(frozen=True)
class PredictionSet:
    """Classes accumulated until the calibrated mass threshold is reached."""

    members: tuple[tuple[FaultClass, float], ...]
    singleton: bool
    argmax_class: FaultClass


@dataclass(frozen=True)
class Diagnosis:
    """Operator-facing result: prediction set plus the coverage guarantee."""

    source_id: str
    prediction_set: tuple[tuple[FaultClass, float], ...]
    alpha: float
    qhat: float
    singleton: bool
    argmax_class: FaultClass


def _checked_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size != len(FaultClass):
        raise BadDistributionError(f"need {len(FaultClass)} probabilities, got shape {p.shape}")
    if (p < 0).any():
        raise BadDistributionError("negative probability entry")
    total = float(p.sum())
    if abs(total - 1.0) > PROB_SUM_TOL:
        raise BadDistributionError(f"probabilities sum to {total!r}")
    # normalize so the full cumulative mass is exactly 1.0
    return p / total


def _descending_order(p: np.ndarray) -> np.ndarray:
    # stable sort on negated values: ties resolve to the lowest class code
    return np.argsort(-p, kind="stable")


def aps_score(probs, true_class: FaultClass) -> float:
    """Cumulative descending-sorted probability through the true class.

    Computed as one minus the mass of the classes ranked below the true
    class, which keeps the score in (0, 1] without clamping (a plain prefix
    cumsum can overshoot 1.0 by an ulp) and makes it exactly 1 when the
    true class sorts last.
    """
    p = _checked_probs(probs)
    order = _descending_order(p)
    pos = int(np.flatnonzero(order == int(true_class))[0])
    return 1.0 - float(p[order][pos + 1 :].sum())


def quantile_threshold(scores, alpha: float) -> float:
    """Finite-sample-corrected score quantile.

    The k-th smallest score with k = ceil((n+1)(1-alpha)); clamps to 1.0
    when k exceeds n (maximal-set behavior for tiny calibration sets).
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise EmptyCalibrationError("no calibration scores")
    n = s.size
    k = math.ceil((n + 1) * (1.0 - alpha))
    if k > n:
        return 1.0
    return float(np.sort(s)[k - 1])


def calibrate(model: MlpModel, calibration_set, alpha: float = 0.05) -> ConformalPredictor:
    """Calibrate the set threshold on labelled (FeatureVector, FaultClass) pairs."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    items = list(calibration_set)
    if not items:
        raise EmptyCalibrationError("calibration set is empty")
    scores = [aps_score(forward(model, fv.values), label) for fv, label in items]
    return ConformalPredictor(
        alpha=alpha,
        qhat=quantile_threshold(scores, alpha),
        n_calibration=len(scores),
        model_digest=model_digest(model),
    )


def predict_set(predictor: ConformalPredictor, probs) -> PredictionSet:
    """Smallest descending-probability prefix with cumulative mass >= qhat.

    The argmax class always enters (the first element is unconditional), so
    the set is never empty; a larger qhat can only grow the set.
    """
    raw = np.asarray(probs, dtype=np.float64)
    p = _checked_probs(probs)
    order = _descending_order(p)
    cum = np.cumsum(p[order])
    size = int(np.searchsorted(cum, predictor.qhat, side="left")) + 1
    size = min(max(size, 1), p.size)
    members = tuple((FaultClass(int(c)), float(raw[c])) for c in order[:size])
    return PredictionSet(
        members=members, singleton=size == 1, argmax_class=members[0][0]
    )


def diagnose(predictor: ConformalPredictor, model: MlpModel, feature) -> Diagnosis:
    """Classify one feature vector and wrap it in a calibrated prediction set."""
    probs = forward(model, feature.values)
    ps = predict_set(predictor, probs)
    return Diagnosis(
        source_id=feature.source_id,
        prediction_set=ps.members,
        alpha=predictor.alpha,
        qhat=predictor.qhat,
        singleton=ps.singleton,
        argmax_class=ps.argmax_class,
    )


def diagnosis_to_obj(d: Diagnosis) -> dict:
    return {
        "source_id": d.source_id,
        "prediction_set": [
            {"class": cls.name, "probability": prob} for cls, prob in d.prediction_set
        ],
        "alpha": d.alpha,
        "qhat": d.qhat,
        "singleton": d.singleton,
        "argmax_class": d.argmax_class.name,
    }


def save_diagnoses(diagnoses, path: str | Path) -> None:
    """Write diagnoses as JSONL, one object per manoeuvre."""
    lines = [json.dumps(diagnosis_to_obj(d)) for d in diagnoses]
    text = "\n".join(lines)
    if lines:
        text += "\n"
    atomic_write_text(path, text)


def save_predictor(predictor: ConformalPredictor, path: str | Path) -> None:
    obj = {
        "alpha": predictor.alpha,
        "qhat": predictor.qhat,
        "n_calibration": predictor.n_calibration,
        "model_digest": predictor.model_digest,
    }
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def load_predictor(path: str | Path) -> ConformalPredictor:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DatasetIoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetIoError(f"{path} is not valid JSON: {exc.msg}") from None
    try:
        return ConformalPredictor(
            alpha=float(obj["alpha"]),
            qhat=float(obj["qhat"]),
            n_calibration=int(obj["n_calibration"]),
            model_digest=str(obj["model_digest"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetIoError(f"{path} is not a valid predictor file: {exc}") from None


def check_digest(predictor: ConformalPredictor, model: MlpModel) -> None:
    """Raise unless the predictor was calibrated against this exact model."""
    digest = model_digest(model)
    if digest != predictor.model_digest:
        raise DigestMismatchError(
            f"predictor calibrated for {predictor.model_digest[:12]}..., "
            f"model digest is {digest[:12]}..."
        )
