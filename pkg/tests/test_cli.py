import json

import numpy as np
import pytest

from pmdiag import cli, synth
from pmdiag.core import FaultClass, Manoeuvre, Dataset, save_dataset, load_dataset


SMALL_CONFIG = {
    "synth": {
        "profile": "MJ",
        "noise_sigma": 0.09,
        "amplitude_jitter": 0.05,
        "duration_jitter": 0.05,
        "seed": 21,
        "counts": {
            "Nominal": 26,
            "Obstacle": 14,
            "Friction": 14,
            "PowerSupply": 12,
            "Misalignment": 10,
        },
        "severity_range": [0.3, 1.0],
    },
    "train": {"epochs": 30, "seed": 21},
    "split": {"seed": 21},
}


@pytest.fixture()
def config_path(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(SMALL_CONFIG))
    return str(p)


def run(argv):
    return cli.main(argv)


class TestGenerate:
    def test_small_config(self, tmp_path, config_path, capsys):
        out = tmp_path / "out"
        assert run(["generate", "--config", config_path, "--out", str(out)]) == 0
        lines = (out / "dataset.jsonl").read_text().splitlines()
        assert len(lines) == 76
        captured = capsys.readouterr()
        assert "Nominal: 26" in captured.out

    def test_default_config_writes_1110(self, tmp_path):
        out = tmp_path / "out"
        assert run(["generate", "--out", str(out)]) == 0
        assert len((out / "dataset.jsonl").read_text().splitlines()) == 1110

    def test_zero_counts(self, tmp_path):
        cfg = {"synth": {"counts": {}}}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        out = tmp_path / "out"
        assert run(["generate", "--config", str(p), "--out", str(out)]) == 0
        assert (out / "dataset.jsonl").read_text() == ""

    def test_missing_config_exits_2(self, tmp_path):
        assert run(["generate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2

    def test_unknown_key_exits_2(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"synth": {"wavelets": True}}))
        assert run(["generate", "--config", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_invalid_json_exits_2(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{nope")
        assert run(["generate", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


class TestPipeline:
    def test_manifest_and_metrics(self, tmp_path, config_path, capsys):
        out = tmp_path / "out"
        assert run(["pipeline", "--config", config_path, "--out", str(out)]) == 0
        for name in (
            "dataset.jsonl",
            "features.jsonl",
            "model.json",
            "predictor.json",
            "report.json",
            "diagnoses.csv",
        ):
            assert (out / name).exists(), name
        report = json.loads((out / "report.json").read_text())
        metrics = report["metrics"]
        for key in ("precision", "fpr", "fnr", "coverage", "mean_set_size"):
            assert key in metrics
        assert 0.0 <= metrics["precision"] <= 1.0
        assert report["counts"]["dataset"]["Nominal"] == 26
        rows = (out / "diagnoses.csv").read_text().splitlines()
        holdout_total = sum(report["counts"]["holdout"].values())
        assert len(rows) == holdout_total + 1

    def test_deterministic_outputs(self, tmp_path, config_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run(["pipeline", "--config", config_path, "--out", str(out1)]) == 0
        assert run(["pipeline", "--config", config_path, "--out", str(out2)]) == 0
        r1 = json.loads((out1 / "report.json").read_text())
        r2 = json.loads((out2 / "report.json").read_text())
        r1.pop("timestamp")
        r2.pop("timestamp")
        assert json.dumps(r1, sort_keys=True) == json.dumps(r2, sort_keys=True)
        assert (out1 / "model.json").read_bytes() == (out2 / "model.json").read_bytes()
        assert (out1 / "dataset.jsonl").read_bytes() == (out2 / "dataset.jsonl").read_bytes()

    def test_flat_signal_exits_4_naming_stage(self, tmp_path, capsys):
        cfg = synth.SynthConfig(profile=synth.DEFAULT_PROFILES["MJ"], noise_sigma=0.05)
        good = [
            synth.generate_nominal(cfg, s, manoeuvre_id=f"good-{s}") for s in range(4)
        ]
        flat = Manoeuvre("flat-1", "MJ", 0.0, np.zeros(100), 100.0, label=FaultClass.Nominal)
        ds = Dataset(manoeuvres=(*good, flat), provenance="handmade")
        ds_path = tmp_path / "flat.jsonl"
        save_dataset(ds, ds_path)
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"paths": {"dataset": str(ds_path)}}))
        code = run(["pipeline", "--config", str(p), "--out", str(tmp_path / "o")])
        captured = capsys.readouterr()
        assert code == 4
        assert "preprocess" in captured.err
        assert "flat-1" in captured.err


class TestDiagnose:
    @pytest.fixture()
    def trained_out(self, tmp_path, config_path):
        out = tmp_path / "out"
        assert run(["pipeline", "--config", config_path, "--out", str(out)]) == 0
        return out

    def test_single_obstacle_trace(self, tmp_path, trained_out, config_path, capsys):
        cfg = synth.SynthConfig(
            profile=synth.DEFAULT_PROFILES["MJ"], noise_sigma=0.09, seed=5
        )
        m = synth.inject_fault(cfg, synth.FaultSpec(FaultClass.Obstacle, 0.9), 50,
                               manoeuvre_id="field-1")
        ds_path = tmp_path / "one.jsonl"
        save_dataset(Dataset(manoeuvres=(m,), provenance="field"), ds_path)
        code = run([
            "diagnose", "--config", config_path, "--out", str(trained_out),
            "--dataset", str(ds_path),
        ])
        captured = capsys.readouterr()
        assert code == 0
        assert "Obstacle" in captured.out
        assert "field-1" in captured.out
        objs = [json.loads(l) for l in (trained_out / "diagnoses.jsonl").read_text().splitlines()]
        assert objs[0]["source_id"] == "field-1"
        classes = {e["class"] for e in objs[0]["prediction_set"]}
        assert "Obstacle" in classes

    def test_digest_mismatch_exits_5(self, tmp_path, trained_out, config_path):
        from pmdiag import model as mlp

        other = mlp.init_params((128, 64, 32, 5), 12345)
        other_path = tmp_path / "other_model.json"
        mlp.save_model(other, other_path)
        code = run([
            "diagnose", "--config", config_path, "--out", str(trained_out),
            "--model", str(other_path),
        ])
        assert code == 5

    def test_unlabelled_dataset_runs(self, tmp_path, trained_out, config_path):
        ds = load_dataset(trained_out / "dataset.jsonl")
        stripped = Dataset(
            manoeuvres=tuple(
                Manoeuvre(m.id, m.technology, m.timestamp, m.samples, m.sample_rate)
                for m in list(ds)[:5]
            ),
            provenance="unlabelled",
        )
        ds_path = tmp_path / "unlabelled.jsonl"
        save_dataset(stripped, ds_path)
        code = run([
            "diagnose", "--config", config_path, "--out", str(trained_out),
            "--dataset", str(ds_path),
        ])
        assert code == 0


class TestStageCommands:
    def test_preprocess_train_calibrate_evaluate(self, tmp_path, config_path, capsys):
        out = tmp_path / "out"
        assert run(["generate", "--config", config_path, "--out", str(out)]) == 0
        assert run(["preprocess", "--config", config_path, "--out", str(out)]) == 0
        assert (out / "features.jsonl").exists()
        assert run(["train", "--config", config_path, "--out", str(out)]) == 0
        assert (out / "model.json").exists()
        assert run(["calibrate", "--config", config_path, "--out", str(out)]) == 0
        assert (out / "predictor.json").exists()
        assert run(["evaluate", "--config", config_path, "--out", str(out)]) == 0
        assert (out / "report.json").exists()
        assert (out / "diagnoses.csv").exists()

    def test_seed_override_changes_dataset(self, tmp_path, config_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run(["generate", "--config", config_path, "--out", str(out1), "--seed", "1"]) == 0
        assert run(["generate", "--config", config_path, "--out", str(out2), "--seed", "2"]) == 0
        assert (out1 / "dataset.jsonl").read_bytes() != (out2 / "dataset.jsonl").read_bytes()
