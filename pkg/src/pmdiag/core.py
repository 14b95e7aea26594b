"""Domain types, validation, and dataset file I/O shared by every pipeline stage.

The dataset interchange format is JSONL: one manoeuvre object per line with
keys ``id``, ``technology``, ``timestamp``, ``sample_rate``, ``samples`` and an
optional ``label``. Floats are written with Python's shortest round-trip repr,
so save -> load is an exact identity on every field.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np

MIN_SAMPLES = 32

DATASET_KEYS = {"id", "technology", "timestamp", "sample_rate", "samples", "label"}
REQUIRED_DATASET_KEYS = DATASET_KEYS - {"label"}


class PmDiagError(Exception):
    """Base class for every toolkit error."""


class DatasetIoError(PmDiagError):
    """A dataset file could not be read or written."""


class ParseError(PmDiagError):
    """A dataset line is not a valid manoeuvre object."""

    def __init__(self, line_number: int, reason: str):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason


class ValidationError(PmDiagError):
    """A manoeuvre violated an invariant; carries the first broken rule."""

    def __init__(self, manoeuvre_id: str, rule: str, detail: str = ""):
        msg = f"manoeuvre {manoeuvre_id!r}: {rule}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.manoeuvre_id = manoeuvre_id
        self.rule = rule


class DuplicateIdError(PmDiagError):
    """Two manoeuvres in one dataset share an id."""

    def __init__(self, manoeuvre_id: str):
        super().__init__(f"duplicate manoeuvre id {manoeuvre_id!r}")
        self.manoeuvre_id = manoeuvre_id


class FaultClass(IntEnum):
    """Diagnostic label taxonomy with stable integer codes.

    Member names are the canonical serialized names.
    """

    Nominal = 0
    Obstacle = 1
    Friction = 2
    PowerSupply = 3
    Misalignment = 4

    @classmethod
    def from_name(cls, name: str) -> "FaultClass":
        try:
            return cls[name]
        except KeyError:
            raise ValueError(f"unknown fault class {name!r}") from None


class SupplyKind(str, Enum):
    AC = "AC"
    DC = "DC"


@dataclass(frozen=True)
class TechnologyProfile:
    """Electrical/mechanical envelope of one point-machine technology."""

    name: str
    supply: SupplyKind
    sample_rate: float
    nominal_peak_amps: float
    plateau_amps: float
    move_duration: float

    def __post_init__(self):
        object.__setattr__(self, "supply", SupplyKind(self.supply))
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not self.nominal_peak_amps > self.plateau_amps > 0:
            raise ValueError("need nominal_peak_amps > plateau_amps > 0")
        if self.move_duration <= 0:
            raise ValueError("move_duration must be positive")


@dataclass(frozen=True, eq=False)
class Manoeuvre:
    """One raw current trace for a single blade movement.

    Invariants (length >= 32, finite samples, positive sample rate) are not
    enforced at construction; `validate_manoeuvre` screens them so that
    malformed field data can still be represented and reported.
    """

    id: str
    technology: str
    timestamp: float
    samples: np.ndarray
    sample_rate: float
    label: FaultClass | None = None

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Manoeuvre):
            return NotImplemented
        return (
            self.id == other.id
            and self.technology == other.technology
            and self.timestamp == other.timestamp
            and self.sample_rate == other.sample_rate
            and self.label == other.label
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of manoeuvres with a provenance tag."""

    manoeuvres: tuple[Manoeuvre, ...]
    provenance: str

    def __post_init__(self):
        object.__setattr__(self, "manoeuvres", tuple(self.manoeuvres))
        seen: set[str] = set()
        for m in self.manoeuvres:
            if m.id in seen:
                raise DuplicateIdError(m.id)
            seen.add(m.id)

    def __len__(self) -> int:
        return len(self.manoeuvres)

    def __iter__(self):
        return iter(self.manoeuvres)

    def class_counts(self) -> dict[FaultClass, int]:
        """Labelled manoeuvre count per class (unlabelled entries ignored)."""
        counts: dict[FaultClass, int] = {}
        for m in self.manoeuvres:
            if m.label is not None:
                counts[m.label] = counts.get(m.label, 0) + 1
        return counts


@dataclass(frozen=True)
class ValidationIssue:
    """First violated validation rule, with context."""

    rule: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.rule}({self.detail})" if self.detail else self.rule


def validate_manoeuvre(m: Manoeuvre) -> ValidationIssue | None:
    """Return None when all invariants hold, else the first violated rule.

    Never raises: rules are checked in a fixed order (TooShort,
    NonFiniteSample, BadSampleRate).
    """
    if len(m.samples) < MIN_SAMPLES:
        return ValidationIssue("TooShort", f"length {len(m.samples)} < {MIN_SAMPLES}")
    finite = np.isfinite(m.samples)
    if not finite.all():
        idx = int(np.flatnonzero(~finite)[0])
        return ValidationIssue("NonFiniteSample", str(idx))
    if not (math.isfinite(m.sample_rate) and m.sample_rate > 0):
        return ValidationIssue("BadSampleRate", repr(m.sample_rate))
    return None


def _manoeuvre_to_obj(m: Manoeuvre) -> dict:
    obj = {
        "id": m.id,
        "technology": m.technology,
        "timestamp": m.timestamp,
        "sample_rate": m.sample_rate,
        "samples": [float(v) for v in m.samples],
    }
    if m.label is not None:
        obj["label"] = m.label.name
    return obj


def _manoeuvre_from_obj(obj: dict, line_number: int) -> Manoeuvre:
    if not isinstance(obj, dict):
        raise ParseError(line_number, "not a JSON object")
    keys = set(obj)
    missing = REQUIRED_DATASET_KEYS - keys
    if missing:
        raise ParseError(line_number, f"missing keys {sorted(missing)}")
    unknown = keys - DATASET_KEYS
    if unknown:
        raise ParseError(line_number, f"unknown keys {sorted(unknown)}")
    label = None
    if "label" in obj:
        try:
            label = FaultClass.from_name(obj["label"])
        except (ValueError, TypeError):
            raise ParseError(line_number, f"bad label {obj['label']!r}") from None
    try:
        samples = np.asarray(obj["samples"], dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError(line_number, "samples is not a numeric array") from None
    if samples.ndim != 1:
        raise ParseError(line_number, "samples is not a flat array")
    if not isinstance(obj["id"], str) or not isinstance(obj["technology"], str):
        raise ParseError(line_number, "id and technology must be strings")
    if not isinstance(obj["timestamp"], (int, float)) or isinstance(obj["timestamp"], bool):
        raise ParseError(line_number, "timestamp must be a number")
    if not isinstance(obj["sample_rate"], (int, float)) or isinstance(obj["sample_rate"], bool):
        raise ParseError(line_number, "sample_rate must be a number")
    return Manoeuvre(
        id=obj["id"],
        technology=obj["technology"],
        timestamp=float(obj["timestamp"]),
        samples=samples,
        sample_rate=float(obj["sample_rate"]),
        label=label,
    )


def load_dataset(path: str | Path) -> Dataset:
    """Load and validate a JSONL dataset, preserving line order."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetIoError(f"cannot read {path}: {exc}") from exc
    manoeuvres: list[Manoeuvre] = []
    seen: set[str] = set()
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(line_number, f"invalid JSON: {exc.msg}") from None
        m = _manoeuvre_from_obj(obj, line_number)
        issue = validate_manoeuvre(m)
        if issue is not None:
            raise ValidationError(m.id, issue.rule, issue.detail)
        if m.id in seen:
            raise DuplicateIdError(m.id)
        seen.add(m.id)
        manoeuvres.append(m)
    return Dataset(manoeuvres=tuple(manoeuvres), provenance=str(path))


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write a dataset as JSONL (atomic: temp file + rename)."""
    lines = [json.dumps(_manoeuvre_to_obj(m)) for m in ds.manoeuvres]
    text = "\n".join(lines)
    if lines:
        text += "\n"
    atomic_write_text(path, text)


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write text to path via a same-directory temp file and rename."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as exc:
        raise DatasetIoError(f"cannot write {path}: {exc}") from exc


def sha256_of_obj(obj) -> str:
    """Stable digest of a JSON-serializable object."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
