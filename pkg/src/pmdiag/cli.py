"""Command-line entry point: reproducible runs from a JSON config.

Subcommands: generate, preprocess, train, calibrate, diagnose, evaluate,
pipeline. Exit codes: 0 success, 2 config error, 3 I/O error, 4 pipeline
stage failure (stage named on stderr), 5 model/predictor digest mismatch.
Output files are written atomically, so failures never leave partial files.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import conformal, evaluation, model, preprocess, synth
from .core import (
    Dataset,
    DatasetIoError,
    FaultClass,
    PmDiagError,
    TechnologyProfile,
    load_dataset,
    save_dataset,
)

DATASET_FILE = "dataset.jsonl"
FEATURES_FILE = "features.jsonl"
MODEL_FILE = "model.json"
TRAINING_LOG_FILE = "training_log.json"
PREDICTOR_FILE = "predictor.json"
REPORT_FILE = "report.json"
DIAGNOSES_CSV = "diagnoses.csv"
DIAGNOSES_JSONL = "diagnoses.jsonl"

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_STAGE = 4
EXIT_DIGEST = 5


class ConfigError(PmDiagError):
    """The run configuration is missing, malformed, or invalid."""


class StageError(PmDiagError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


DEFAULT_COUNTS = {
    FaultClass.Nominal: 356,
    FaultClass.Obstacle: 274,
    FaultClass.Friction: 355,
    FaultClass.PowerSupply: 125,
}


@dataclass
class RunConfig:
    synth_cfg: synth.SynthConfig
    counts: "dict[FaultClass, int]"
    severity_range: tuple[float, float]
    preprocess_cfg: preprocess.PreprocessConfig
    train_cfg: model.TrainConfig
    alpha: float
    split_spec: evaluation.SplitSpec
    paths: "dict[str, str]"

    def to_obj(self) -> dict:
        return {
            "synth": {
                **self.synth_cfg.to_obj(),
                "counts": {cls.name: n for cls, n in sorted(self.counts.items(), key=lambda kv: int(kv[0]))},
                "severity_range": list(self.severity_range),
            },
            "preprocess": {
                "smooth_window": self.preprocess_cfg.smooth_window,
                "active_threshold_frac": self.preprocess_cfg.active_threshold_frac,
                "noise_floor": self.preprocess_cfg.noise_floor,
                "feature_length": self.preprocess_cfg.feature_length,
                "plateau_core_frac": self.preprocess_cfg.plateau_core_frac,
            },
            "train": self.train_cfg.to_obj(),
            "conformal": {"alpha": self.alpha},
            "split": self.split_spec.to_obj(),
            "paths": dict(self.paths),
        }


def _check_keys(section: str, obj: dict, allowed: set) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")


def _build_section(section: str, obj: dict, allowed: set, factory):
    if not isinstance(obj, dict):
        raise ConfigError(f"section {section!r} must be an object")
    _check_keys(section, obj, allowed)
    try:
        return factory(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


def _parse_profile(obj) -> TechnologyProfile:
    if isinstance(obj, str):
        if obj not in synth.DEFAULT_PROFILES:
            raise ConfigError(
                f"unknown profile {obj!r}; known: {sorted(synth.DEFAULT_PROFILES)}"
            )
        return synth.DEFAULT_PROFILES[obj]
    allowed = {"name", "supply", "sample_rate", "nominal_peak_amps", "plateau_amps", "move_duration"}
    return _build_section("synth.profile", obj, allowed, TechnologyProfile)


def _parse_counts(obj) -> "dict[FaultClass, int]":
    if not isinstance(obj, dict):
        raise ConfigError("synth.counts must map class names to counts")
    counts = {}
    for name, n in obj.items():
        try:
            cls = FaultClass.from_name(name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not isinstance(n, int) or isinstance(n, bool) or n < 0:
            raise ConfigError(f"count for {name} must be a nonnegative integer")
        counts[cls] = n
    return counts


def parse_run_config(obj: dict, seed_override: "int | None" = None) -> RunConfig:
    """Validate and materialize a RunConfig; unknown keys are rejected."""
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys("<root>", obj, {"synth", "preprocess", "train", "conformal", "split", "paths"})

    synth_obj = dict(obj.get("synth", {}))
    _check_keys(
        "synth",
        synth_obj,
        {
            "profile",
            "unlock_peak_duration",
            "lock_peak_duration",
            "noise_sigma",
            "amplitude_jitter",
            "duration_jitter",
            "seed",
            "counts",
            "severity_range",
        },
    )
    profile = _parse_profile(synth_obj.pop("profile", "MJ"))
    counts = _parse_counts(synth_obj.pop("counts", {c.name: n for c, n in DEFAULT_COUNTS.items()}))
    severity_range = synth_obj.pop("severity_range", [0.3, 1.0])
    if (
        not isinstance(severity_range, (list, tuple))
        or len(severity_range) != 2
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in severity_range)
    ):
        raise ConfigError("synth.severity_range must be [lo, hi]")
    defaults = {
        "noise_sigma": 0.03 * profile.plateau_amps,
        "amplitude_jitter": 0.05,
        "duration_jitter": 0.05,
        "seed": 42,
    }
    for key, value in defaults.items():
        synth_obj.setdefault(key, value)
    try:
        synth_cfg = synth.SynthConfig(profile=profile, **synth_obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section 'synth': {exc}") from None

    preprocess_cfg = _build_section(
        "preprocess",
        obj.get("preprocess", {}),
        {"smooth_window", "active_threshold_frac", "noise_floor", "feature_length", "plateau_core_frac"},
        preprocess.PreprocessConfig,
    )
    train_obj = dict(obj.get("train", {}))
    train_obj.setdefault("seed", 7)
    train_cfg = _build_section(
        "train",
        train_obj,
        {"learning_rate", "momentum", "epochs", "batch_size", "seed", "class_weights"},
        model.TrainConfig,
    )
    conformal_obj = obj.get("conformal", {})
    if not isinstance(conformal_obj, dict):
        raise ConfigError("section 'conformal' must be an object")
    _check_keys("conformal", conformal_obj, {"alpha"})
    alpha = conformal_obj.get("alpha", 0.05)
    if not isinstance(alpha, (int, float)) or isinstance(alpha, bool) or not 0 < alpha < 1:
        raise ConfigError("conformal.alpha must be in (0, 1)")

    split_obj = dict(obj.get("split", {}))
    split_obj.setdefault("seed", 11)
    split_spec = _build_section(
        "split",
        split_obj,
        {"train_frac", "calibration_frac_of_test", "seed"},
        evaluation.SplitSpec,
    )
    paths = obj.get("paths", {})
    if not isinstance(paths, dict) or not all(isinstance(v, str) for v in paths.values()):
        raise ConfigError("section 'paths' must map names to path strings")
    _check_keys("paths", paths, {"dataset", "features", "model", "predictor"})

    cfg = RunConfig(
        synth_cfg=synth_cfg,
        counts=counts,
        severity_range=(float(severity_range[0]), float(severity_range[1])),
        preprocess_cfg=preprocess_cfg,
        train_cfg=train_cfg,
        alpha=float(alpha),
        split_spec=split_spec,
        paths=dict(paths),
    )
    if seed_override is not None:
        cfg = _override_seeds(cfg, seed_override)
    return cfg


def _override_seeds(cfg: RunConfig, seed: int) -> RunConfig:
    from dataclasses import replace

    return RunConfig(
        synth_cfg=replace(cfg.synth_cfg, seed=seed),
        counts=cfg.counts,
        severity_range=cfg.severity_range,
        preprocess_cfg=cfg.preprocess_cfg,
        train_cfg=replace(cfg.train_cfg, seed=seed),
        alpha=cfg.alpha,
        split_spec=replace(cfg.split_spec, seed=seed),
        paths=cfg.paths,
    )


def load_run_config(path: "str | None", seed_override: "int | None" = None) -> RunConfig:
    if path is None:
        return parse_run_config({}, seed_override)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from None
    return parse_run_config(obj, seed_override)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _class_counts_obj(ds: Dataset) -> dict:
    return {cls.name: n for cls, n in sorted(ds.class_counts().items(), key=lambda kv: int(kv[0]))}


def _preprocess_dataset(ds: Dataset, cfg: preprocess.PreprocessConfig):
    """Features in dataset order; failures name the offending manoeuvre."""
    records = []
    for m in ds:
        try:
            records.append((preprocess.preprocess(m, cfg), m.label))
        except PmDiagError as exc:
            raise StageError("preprocess", PmDiagError(f"manoeuvre {m.id!r}: {exc}")) from exc
    return records


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (StageError, DatasetIoError):
        raise
    except PmDiagError as exc:
        raise StageError(name, exc) from exc


def cmd_generate(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    ds = _stage(
        "generate", synth.generate_dataset, cfg.counts, cfg.synth_cfg, cfg.severity_range
    )
    save_dataset(ds, out / DATASET_FILE)
    for cls in sorted(cfg.counts, key=int):
        print(f"{cls.name}: {cfg.counts[cls]}")
    print(f"wrote {len(ds)} manoeuvres to {out / DATASET_FILE}")
    return 0


def _input_dataset(cfg: RunConfig, out: Path) -> Dataset:
    path = cfg.paths.get("dataset", str(out / DATASET_FILE))
    return load_dataset(path)


def cmd_preprocess(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    ds = _stage("load", _input_dataset, cfg, out)
    records = _preprocess_dataset(ds, cfg.preprocess_cfg)
    preprocess.save_features(records, out / FEATURES_FILE)
    print(f"wrote {len(records)} feature vectors to {out / FEATURES_FILE}")
    return 0


def _labelled(records, stage: str):
    labelled = [(fv, label) for fv, label in records if label is not None]
    if not labelled:
        raise StageError(stage, PmDiagError("no labelled features"))
    return labelled


def _train_weights(cfg: RunConfig, labelled) -> model.TrainConfig:
    """Fill class weights from data counts unless the config pinned them."""
    if cfg.train_cfg.class_weights != (1.0,) * len(FaultClass):
        return cfg.train_cfg
    counts: dict[FaultClass, int] = {}
    for _, label in labelled:
        counts[label] = counts.get(label, 0) + 1
    weights = model.weight_vector(model.class_weights(counts))
    from dataclasses import replace

    return replace(cfg.train_cfg, class_weights=weights)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    features_path = cfg.paths.get("features", str(out / FEATURES_FILE))
    records = _stage("load", preprocess.load_features, features_path)
    labelled = _labelled(records, "train")
    train_cfg = _stage("train", _train_weights, cfg, labelled)
    result = _stage("train", model.train, labelled, train_cfg)
    model.save_model(result.model, out / MODEL_FILE, train_cfg, provenance=str(features_path))
    evaluation.write_report({"epoch_losses": result.epoch_losses}, out / TRAINING_LOG_FILE)
    print(f"trained on {len(labelled)} features; final loss {result.epoch_losses[-1]:.6f}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    model_path = cfg.paths.get("model", str(out / MODEL_FILE))
    features_path = cfg.paths.get("features", str(out / FEATURES_FILE))
    mdl = _stage("load", model.load_model, model_path)
    records = _stage("load", preprocess.load_features, features_path)
    labelled = _labelled(records, "calibrate")
    predictor = _stage("calibrate", conformal.calibrate, mdl, labelled, cfg.alpha)
    conformal.save_predictor(predictor, out / PREDICTOR_FILE)
    print(
        f"calibrated on {predictor.n_calibration} features: "
        f"alpha={predictor.alpha} qhat={predictor.qhat:.6f}"
    )
    return 0


def cmd_diagnose(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    model_path = args.model or cfg.paths.get("model", str(out / MODEL_FILE))
    predictor_path = args.predictor or cfg.paths.get("predictor", str(out / PREDICTOR_FILE))
    dataset_path = args.dataset or cfg.paths.get("dataset", str(out / DATASET_FILE))
    mdl = _stage("load", model.load_model, model_path)
    predictor = _stage("load", conformal.load_predictor, predictor_path)
    conformal.check_digest(predictor, mdl)
    ds = _stage("load", load_dataset, dataset_path)
    records = _preprocess_dataset(ds, cfg.preprocess_cfg)
    diagnoses = [
        _stage("diagnose", conformal.diagnose, predictor, mdl, fv) for fv, _ in records
    ]
    conformal.save_diagnoses(diagnoses, out / DIAGNOSES_JSONL)
    guarantee = 100.0 * (1.0 - predictor.alpha)
    for d in diagnoses:
        members = ", ".join(f"{cls.name}:{prob:.3f}" for cls, prob in d.prediction_set)
        print(f"{d.source_id}: {{{members}}} (set covers the true class at {guarantee:.0f}%)")
    return 0


def _evaluate(mdl, predictor, records):
    labelled = _labelled(records, "evaluate")
    predictions = []
    diagnoses = []
    for fv, label in labelled:
        d = conformal.diagnose(predictor, mdl, fv)
        diagnoses.append((label, d))
        predictions.append((d.argmax_class, label))
    coverage, mean_size = evaluation.coverage_eval(predictor, mdl, labelled)
    metrics = evaluation.build_metrics(predictions, coverage, mean_size)
    return metrics, diagnoses


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    model_path = cfg.paths.get("model", str(out / MODEL_FILE))
    predictor_path = cfg.paths.get("predictor", str(out / PREDICTOR_FILE))
    features_path = cfg.paths.get("features", str(out / FEATURES_FILE))
    mdl = _stage("load", model.load_model, model_path)
    predictor = _stage("load", conformal.load_predictor, predictor_path)
    conformal.check_digest(predictor, mdl)
    records = _stage("load", preprocess.load_features, features_path)
    metrics, diagnoses = _stage("evaluate", _evaluate, mdl, predictor, records)
    report = {
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "config": cfg.to_obj(),
        "metrics": metrics.to_obj(),
    }
    evaluation.write_report(report, out / REPORT_FILE)
    evaluation.write_diagnoses_csv(diagnoses, out / DIAGNOSES_CSV)
    print(
        f"precision={metrics.precision:.4f} fpr={metrics.fpr:.4f} "
        f"fnr={metrics.fnr:.4f} coverage={metrics.coverage:.4f}"
    )
    return 0


def cmd_pipeline(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out = _out_dir(args)

    if "dataset" in cfg.paths:
        ds = _stage("load", load_dataset, cfg.paths["dataset"])
    else:
        ds = _stage(
            "generate", synth.generate_dataset, cfg.counts, cfg.synth_cfg, cfg.severity_range
        )
    save_dataset(ds, out / DATASET_FILE)

    records = _preprocess_dataset(ds, cfg.preprocess_cfg)
    preprocess.save_features(records, out / FEATURES_FILE)
    features_by_id = {fv.source_id: (fv, label) for fv, label in records}

    train_ds, test_ds = _stage("split", evaluation.stratified_split, ds, cfg.split_spec)
    train_records = [features_by_id[m.id] for m in train_ds]
    train_cfg = _stage("train", _train_weights, cfg, train_records)
    result = _stage("train", model.train, train_records, train_cfg)
    model.save_model(result.model, out / MODEL_FILE, train_cfg, provenance=ds.provenance)

    cal_ds, hold_ds = _stage("calibrate", evaluation.split_calibration, test_ds, cfg.split_spec)
    cal_records = [features_by_id[m.id] for m in cal_ds]
    predictor = _stage("calibrate", conformal.calibrate, result.model, cal_records, cfg.alpha)
    conformal.save_predictor(predictor, out / PREDICTOR_FILE)

    # classification metrics over the whole test split; coverage over holdout
    test_records = [features_by_id[m.id] for m in test_ds]
    predictions = [
        (model.argmax_class(model.forward(result.model, fv.values)), label)
        for fv, label in test_records
    ]
    hold_records = [features_by_id[m.id] for m in hold_ds]
    diagnoses = [
        (label, conformal.diagnose(predictor, result.model, fv)) for fv, label in hold_records
    ]
    coverage, mean_size = _stage(
        "diagnose", evaluation.coverage_eval, predictor, result.model, hold_records
    )
    metrics = evaluation.build_metrics(predictions, coverage, mean_size)

    report = {
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "config": cfg.to_obj(),
        "provenance": {
            "dataset": ds.provenance,
            "model_digest": predictor.model_digest,
        },
        "counts": {
            "dataset": _class_counts_obj(ds),
            "train": _class_counts_obj(train_ds),
            "test": _class_counts_obj(test_ds),
            "calibration": _class_counts_obj(cal_ds),
            "holdout": _class_counts_obj(hold_ds),
        },
        "conformal": {
            "alpha": predictor.alpha,
            "qhat": predictor.qhat,
            "n_calibration": predictor.n_calibration,
        },
        "metrics": metrics.to_obj(),
        "training_log": result.epoch_losses,
    }
    evaluation.write_report(report, out / REPORT_FILE)
    evaluation.write_diagnoses_csv(diagnoses, out / DIAGNOSES_CSV)
    print(
        f"pipeline done: precision={metrics.precision:.4f} fpr={metrics.fpr:.4f} "
        f"fnr={metrics.fnr:.4f} coverage={metrics.coverage:.4f} "
        f"mean_set_size={metrics.mean_set_size:.2f}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults apply when omitted)")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument("--seed", type=int, help="override every config seed")

    parser = argparse.ArgumentParser(
        prog="pm-diag",
        description="Point-machine power-signal diagnostics pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="generate a synthetic dataset").set_defaults(
        func=cmd_generate
    )
    sub.add_parser("preprocess", parents=[common], help="dataset to feature vectors").set_defaults(
        func=cmd_preprocess
    )
    sub.add_parser("train", parents=[common], help="train the classifier").set_defaults(
        func=cmd_train
    )
    sub.add_parser(
        "calibrate", parents=[common], help="calibrate the conformal predictor"
    ).set_defaults(func=cmd_calibrate)
    diag = sub.add_parser(
        "diagnose", parents=[common], help="diagnose raw manoeuvres with prediction sets"
    )
    diag.add_argument("--model", help="model file (default: <out>/model.json)")
    diag.add_argument("--predictor", help="predictor file (default: <out>/predictor.json)")
    diag.add_argument("--dataset", help="dataset file (default: <out>/dataset.jsonl)")
    diag.set_defaults(func=cmd_diagnose)
    sub.add_parser(
        "evaluate", parents=[common], help="metrics and report for labelled features"
    ).set_defaults(func=cmd_evaluate)
    sub.add_parser("pipeline", parents=[common], help="run every stage end to end").set_defaults(
        func=cmd_pipeline
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except conformal.DigestMismatchError as exc:
        print(f"digest mismatch: {exc}", file=sys.stderr)
        return EXIT_DIGEST
    except StageError as exc:
        print(f"pipeline failure in {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_STAGE
    except (DatasetIoError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
