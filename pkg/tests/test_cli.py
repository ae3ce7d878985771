from __future__ import annotations

import json

import pytest
import yaml

from cmestorm.cli import main
from cmestorm.ensemble import EventPrediction, write_predictions

SMALL_MODEL = {"stub_backbones": True, "conv_channels": [8, 8, 8], "dense_units": 16}


@pytest.fixture
def workspace(tmp_path):
    cfg = {
        "seed": 0,
        "paths": {"dataset": str(tmp_path / "data"), "output": str(tmp_path / "runs")},
        "model": SMALL_MODEL,
        "train": {"epochs": 1, "batch_size": 16},
        "synth": {"n_events": 10, "image_shape": [16, 16], "frames_per_instrument": {"C2": 2, "EIT": 1, "MDI": 1}},
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["synth", "--config", str(path), "--run-dir", str(tmp_path / "runs" / "synth")]) == 0
    return tmp_path, path


def test_synth_run_dir(workspace):
    tmp, _ = workspace
    run = tmp / "runs" / "synth"
    assert (run / "config.yaml").exists() and (run / "run.log").exists()
    assert not (run / "INCOMPLETE").exists()
    assert (tmp / "data" / "manifest.jsonl").exists()
    snap = yaml.safe_load((run / "config.yaml").read_text())
    assert snap["seed"] == 0 and snap["model"]["name"] == "model"


def test_train_then_predict(workspace, capsys):
    tmp, cfg = workspace
    assert main(["train", "--config", str(cfg), "--run-dir", str(tmp / "t")]) == 0
    for name in ("split.json", "history.csv", "train.json", "weights/final", "weights/best"):
        assert (tmp / "t" / name).exists(), name
    event = tmp / "data" / "SYN0001"
    capsys.readouterr()
    assert main(["predict", "--config", str(cfg), "--weights", str(tmp / "t" / "weights" / "best"),
                 "--event-dir", str(event), "--probabilistic", "--run-dir", str(tmp / "p")]) == 0
    out = json.loads((tmp / "p" / "prediction.json").read_text())
    assert "decision" not in out and 0.0 <= out["event_probability"] <= 1.0
    assert main(["predict", "--config", str(cfg), "--weights", str(tmp / "t" / "weights" / "best"),
                 "--event-dir", str(event), "--run-dir", str(tmp / "p2")]) == 0
    out = json.loads((tmp / "p2" / "prediction.json").read_text())
    assert out["decision"] in ("geoeffective", "non_geoeffective") and out["threshold_used"] == 0.6
    assert main(["eval", "--config", str(cfg), "--weights", str(tmp / "t" / "weights" / "best"),
                 "--split", str(tmp / "t" / "split.json"), "--run-dir", str(tmp / "e")]) == 0
    rep = json.loads((tmp / "e" / "report.json").read_text())
    split = json.loads((tmp / "t" / "split.json").read_text())
    assert rep["meta"]["split_id_hash"] == split["id_hash"]


def test_cv_writes_five_folds_and_average(workspace):
    tmp, cfg = workspace
    assert main(["cv", "--config", str(cfg), "--run-dir", str(tmp / "cv")]) == 0
    assert sorted(p.name for p in (tmp / "cv").glob("*.json")) == [
        "average.json", "fold-1.json", "fold-2.json", "fold-3.json", "fold-4.json", "fold-5.json"]
    avg = json.loads((tmp / "cv" / "average.json").read_text())
    mccs = [json.loads((tmp / "cv" / f"fold-{i}.json").read_text())["mcc"] for i in range(1, 6)]
    assert avg["mean"]["mcc"] == pytest.approx(sum(mccs) / 5)


def test_eval_on_stored_predictions(tmp_path, capsys):
    preds, truths = [], {}
    for k, (y, p) in enumerate([(1, 0.8)] * 21 + [(0, 0.7)] * 2 + [(0, 0.2)] * 5):
        preds.append(EventPrediction.from_images(f"E{k}", {"EIT": [(None, p)]}))
        truths[f"E{k}"] = y
    write_predictions(tmp_path / "preds.jsonl", preds)
    (tmp_path / "truth.json").write_text(json.dumps(truths))
    code = main(["eval", "--predictions", str(tmp_path / "preds.jsonl"), "--truths", str(tmp_path / "truth.json"),
                 "--run-dir", str(tmp_path / "run")])
    assert code == 0
    rep = json.loads((tmp_path / "run" / "report.json").read_text())
    assert abs(rep["mcc"] - 0.807) <= 0.001 and abs(rep["tss"] - 0.714) <= 0.001
    assert rep["matrix"] == {"tp": 21, "fp": 2, "fn": 0, "tn": 5}


def test_exit_codes(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 1
    assert main(["train", "--dataset", str(tmp_path / "missing"), "--run-dir", str(tmp_path / "a")]) == 1
    assert (tmp_path / "a" / "INCOMPLETE").exists()
    (tmp_path / "empty").mkdir()
    assert main(["train", "--dataset", str(tmp_path / "empty"), "--run-dir", str(tmp_path / "b")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {epochs: 0}\n")
    assert main(["train", "--config", str(bad)]) == 1


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "0.1.0" in capsys.readouterr().out


def test_ingest(tmp_path, capsys):
    from test_catalog import LASCO_TXT, RC_HTML

    (tmp_path / "rc.html").write_text(RC_HTML)
    (tmp_path / "univ.txt").write_text(LASCO_TXT)
    code = main(["ingest", "--rc-list", str(tmp_path / "rc.html"), "--lasco", str(tmp_path / "univ.txt"),
                 "--run-dir", str(tmp_path / "run")])
    assert code == 0
    lines = (tmp_path / "run" / "catalog.jsonl").read_text().splitlines()
    assert lines and all(json.loads(line)["event_id"] for line in lines)
    assert "geoeffective" in capsys.readouterr().out
    assert main(["ingest", "--rc-list", str(tmp_path / "rc.html"), "--run-dir", str(tmp_path / "r2")]) == 1
