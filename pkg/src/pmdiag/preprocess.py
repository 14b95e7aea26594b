"""Raw manoeuvre to fixed-length, shape-only feature vector.

The chain is smooth -> active-window detection -> phase segmentation ->
plateau-median normalization -> resampling to a fixed number of points.
Dividing by the plateau median makes the output exactly invariant to
amplitude scaling, and resampling over the active window makes it invariant
to sample rate and manoeuvre duration, so the vector captures manoeuvre
shape and nothing about the installation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    DatasetIoError,
    FaultClass,
    Manoeuvre,
    ParseError,
    PmDiagError,
    ValidationError,
    atomic_write_text,
    validate_manoeuvre,
)

# Peak/plateau boundary: a phase boundary is where the smoothed signal
# settles into [0, PLATEAU_BAND * plateau_level]. Above default noise,
# below the weakest fault elevation (1.2x).
PLATEAU_BAND = 1.15


class WindowTooLargeError(PmDiagError):
    """Smoothing window exceeds the trace length."""


class FlatSignalError(PmDiagError):
    """The trace never rises above the noise floor."""


class SegmentationFailedError(PmDiagError):
    """No three-phase structure found (a phase would be empty)."""


@dataclass(frozen=True)
class PreprocessConfig:
    smooth_window: int = 5
    active_threshold_frac: float = 0.1
    noise_floor: float = 1e-6
    feature_length: int = 128
    plateau_core_frac: float = 0.5

    def __post_init__(self):
        if self.smooth_window < 3 or self.smooth_window % 2 == 0:
            raise ValueError("smooth_window must be odd and >= 3")
        if not 0 < self.active_threshold_frac < 1:
            raise ValueError("active_threshold_frac must be in (0, 1)")
        if self.feature_length < 16:
            raise ValueError("feature_length must be >= 16")
        if not 0 < self.plateau_core_frac <= 1:
            raise ValueError("plateau_core_frac must be in (0, 1]")


@dataclass(frozen=True)
class PhaseSegmentation:
    """Index ranges of the three manoeuvre phases within the trace."""

    active: tuple[int, int]
    unlock_peak: tuple[int, int]
    movement: tuple[int, int]
    lock_peak: tuple[int, int]
    plateau_level: float


@dataclass(frozen=True)
class FeatureAux:
    move_duration_s: float
    peak_ratio: float


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Fixed-length normalized representation of one manoeuvre."""

    values: np.ndarray
    source_id: str
    aux: FeatureAux

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)


def smooth(samples: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average with reflected edges; length-preserving."""
    x = np.asarray(samples, dtype=np.float64)
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be odd and >= 3")
    if window > x.size:
        raise WindowTooLargeError(f"window {window} > length {x.size}")
    half = window // 2
    padded = np.pad(x, half, mode="reflect")
    kernel = np.full(window, 1.0 / window)
    return np.convolve(padded, kernel, mode="valid")


def detect_active_window(smoothed: np.ndarray, cfg: PreprocessConfig) -> tuple[int, int]:
    """Index range [first, last+1) where the trace exceeds the threshold."""
    s = np.asarray(smoothed, dtype=np.float64)
    peak = float(s.max())
    if peak <= cfg.noise_floor:
        raise FlatSignalError(f"max {peak!r} <= noise floor {cfg.noise_floor!r}")
    above = np.flatnonzero(s > cfg.active_threshold_frac * peak)
    return int(above[0]), int(above[-1]) + 1


def segment_phases(
    smoothed: np.ndarray, active: tuple[int, int], cfg: PreprocessConfig
) -> PhaseSegmentation:
    """Split the active window into unlock peak, movement, lock peak.

    The plateau level is the median of the central part of the active
    window. A peak/plateau boundary is the first index where the signal
    drops into the plateau band and holds it for at least smooth_window
    samples after the peak has exceeded the band (mirrored for the lock
    peak from the end of the window).
    """
    a, b = active
    n = b - a
    if n < 32:
        raise SegmentationFailedError(f"active window too short ({n} samples)")
    s = np.asarray(smoothed[a:b], dtype=np.float64)
    w = cfg.smooth_window

    core_pad = int(math.floor(n * (1.0 - cfg.plateau_core_frac) / 2.0))
    core = s[core_pad : n - core_pad]
    plateau_level = float(np.median(core))
    if plateau_level <= 0:
        raise SegmentationFailedError("plateau level is not positive")

    band = PLATEAU_BAND * plateau_level
    above = s > band
    if not above.any():
        raise SegmentationFailedError("no peak exceeds the plateau band")
    p0 = int(np.argmax(above))
    p1 = n - 1 - int(np.argmax(above[::-1]))

    in_band = (s >= 0.0) & (s <= band)
    if n < w:
        raise SegmentationFailedError("active window shorter than smooth window")
    run_ok = np.convolve(in_band.astype(np.int64), np.ones(w, dtype=np.int64), "valid") == w

    starts = np.flatnonzero(run_ok[p0 + 1 :])
    if starts.size == 0:
        raise SegmentationFailedError("no plateau after the unlock peak")
    i = p0 + 1 + int(starts[0])

    last_start = p1 - w  # run [j, j+w) must end before the lock peak top
    ends = np.flatnonzero(run_ok[: last_start + 1]) if last_start >= 0 else np.array([], int)
    if ends.size == 0:
        raise SegmentationFailedError("no plateau before the lock peak")
    k = int(ends[-1]) + w

    if not i < k:
        raise SegmentationFailedError("movement phase is empty")
    return PhaseSegmentation(
        active=(a, b),
        unlock_peak=(a, a + i),
        movement=(a + i, a + k),
        lock_peak=(a + k, b),
        plateau_level=plateau_level,
    )


def _refined_endpoints(
    s: np.ndarray, active: tuple[int, int], threshold: float
) -> tuple[float, float]:
    # Sub-sample threshold-crossing positions. Integer endpoints shift the
    # resampling grid by up to one sample between sample rates, which is
    # the dominant cross-rate feature error at steep edges.
    a, b = active
    p0 = float(a)
    if a > 0 and s[a] > s[a - 1]:
        p0 = a - (s[a] - threshold) / (s[a] - s[a - 1])
        p0 = min(max(p0, a - 1.0), float(a))
    p1 = float(b - 1)
    if b < s.size and s[b - 1] > s[b]:
        p1 = (b - 1) + (s[b - 1] - threshold) / (s[b - 1] - s[b])
        p1 = min(max(p1, float(b - 1)), float(b))
    return p0, p1


def preprocess(m: Manoeuvre, cfg: PreprocessConfig = PreprocessConfig()) -> FeatureVector:
    """Turn a raw manoeuvre into a normalized fixed-length feature vector.

    The output is invariant (to float roundoff) under scaling of the input
    amplitude, and invariant within interpolation tolerance under change of
    sample rate for the same underlying shape.
    """
    issue = validate_manoeuvre(m)
    if issue is not None:
        raise ValidationError(m.id, issue.rule, issue.detail)
    s = smooth(m.samples, cfg.smooth_window)
    active = detect_active_window(s, cfg)
    seg = segment_phases(s, active, cfg)

    threshold = cfg.active_threshold_frac * float(s.max())
    p0, p1 = _refined_endpoints(s, active, threshold)
    L = cfg.feature_length
    grid = p0 + (p1 - p0) * np.arange(L, dtype=np.float64) / (L - 1)
    values = np.interp(grid, np.arange(s.size, dtype=np.float64), s) / seg.plateau_level
    values = np.maximum(values, 0.0)

    u0, u1 = seg.unlock_peak
    m0, m1 = seg.movement
    aux = FeatureAux(
        move_duration_s=(m1 - m0) / m.sample_rate,
        peak_ratio=float(s[u0:u1].max()) / seg.plateau_level,
    )
    return FeatureVector(values=values, source_id=m.id, aux=aux)


FEATURE_KEYS = {"source_id", "values", "aux", "label"}
AUX_KEYS = {"move_duration_s", "peak_ratio"}


def save_features(
    records: "list[tuple[FeatureVector, FaultClass | None]]", path: str | Path
) -> None:
    """Write features as JSONL with pass-through labels."""
    lines = []
    for fv, label in records:
        obj = {
            "source_id": fv.source_id,
            "values": [float(v) for v in fv.values],
            "aux": {
                "move_duration_s": fv.aux.move_duration_s,
                "peak_ratio": fv.aux.peak_ratio,
            },
        }
        if label is not None:
            obj["label"] = label.name
        lines.append(json.dumps(obj))
    text = "\n".join(lines)
    if lines:
        text += "\n"
    atomic_write_text(path, text)


def load_features(path: str | Path) -> "list[tuple[FeatureVector, FaultClass | None]]":
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetIoError(f"cannot read {path}: {exc}") from exc
    records: list[tuple[FeatureVector, FaultClass | None]] = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(line_number, f"invalid JSON: {exc.msg}") from None
        if not isinstance(obj, dict) or not FEATURE_KEYS >= set(obj):
            raise ParseError(line_number, "not a feature object")
        try:
            aux = FeatureAux(**{k: float(obj["aux"][k]) for k in AUX_KEYS})
            label = FaultClass.from_name(obj["label"]) if "label" in obj else None
            fv = FeatureVector(
                values=np.asarray(obj["values"], dtype=np.float64),
                source_id=obj["source_id"],
                aux=aux,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(line_number, f"bad feature record: {exc}") from None
        records.append((fv, label))
    return records
