import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from csti.data import generate_synthetic_market, save_series_csv
from csti.errors import DivergenceError, SpecValidationError
from csti.experiment import (
    load_round_checkpoint,
    main,
    run_experiment,
    validate_spec,
)

SRC_DIR = str(Path(__file__).resolve().parents[1] / "src")


def spec_doc(out_dir, **overrides):
    doc = {
        "seed": 5,
        "out_dir": str(out_dir),
        "data": {"source": "synthetic", "stocks": 3, "length": 240,
                 "shared_strength": 0.7},
        "features": ["without_sentiment"],
        "models": ["dlinear"],
        "strategies": ["normal", "csti"],
        "training": {"merge_rounds": 3, "finetune_epochs": 3},
    }
    doc.update(overrides)
    return doc


def write_spec(tmp_path, doc, name="spec.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def test_empty_spec_reports_every_required_field(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("", encoding="utf-8")
    with pytest.raises(SpecValidationError) as err:
        validate_spec(path)
    text = " ".join(err.value.errors)
    for field in ("out_dir", "data", "models", "strategies"):
        assert field in text


def test_negative_lambda_names_the_field(tmp_path):
    doc = spec_doc(tmp_path / "out")
    doc["training"]["lambda"] = -1
    with pytest.raises(SpecValidationError) as err:
        validate_spec(write_spec(tmp_path, doc))
    assert any("lambda" in e and ">= 0" in e for e in err.value.errors)


def test_out_of_scope_model_kind_is_called_out(tmp_path):
    doc = spec_doc(tmp_path / "out", models=["timesnet"])
    with pytest.raises(SpecValidationError) as err:
        validate_spec(write_spec(tmp_path, doc))
    joined = " ".join(err.value.errors)
    assert "timesnet" in joined and "out of scope" in joined
    assert "dlinear" in joined  # supported kinds enumerated

    doc = spec_doc(tmp_path / "out", models=["nosuchmodel"])
    with pytest.raises(SpecValidationError) as err:
        validate_spec(write_spec(tmp_path, doc, "spec2.json"))
    joined = " ".join(err.value.errors)
    assert "nosuchmodel" in joined and "paifilter" in joined


def test_missing_csv_fails_validation_before_training(tmp_path):
    doc = spec_doc(tmp_path / "out")
    doc["data"] = {"source": "csv", "paths": ["nope.csv"]}
    with pytest.raises(SpecValidationError) as err:
        validate_spec(write_spec(tmp_path, doc))
    assert any("not found" in e for e in err.value.errors)


def test_validation_collects_multiple_errors_at_once(tmp_path):
    doc = spec_doc(tmp_path / "out", models=["timesnet"], strategies=["foo"])
    doc["training"]["lambda"] = -2
    doc["jobs"] = 0
    with pytest.raises(SpecValidationError) as err:
        validate_spec(write_spec(tmp_path, doc))
    assert len(err.value.errors) >= 4


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def test_cell_arithmetic_and_output_tree(tmp_path):
    out = tmp_path / "out"
    doc = spec_doc(out, features=["with_sentiment", "without_sentiment"])
    spec = validate_spec(write_spec(tmp_path, doc))
    summary = run_experiment(spec)
    assert len(summary) == 4  # 2 strategies x 2 feature sets
    for cell in summary:
        cell_dir = out / cell
        assert (cell_dir / "report.json").is_file()
        assert (cell_dir / "trace.csv").is_file()
        assert list(cell_dir.glob("regression-*.csv"))
    assert (out / "summary.csv").is_file()
    ckpts = sorted((out / "dlinear/csti/without_sentiment/checkpoints").glob("round-*.pvec"))
    assert len(ckpts) == 3
    round_index, pvec = load_round_checkpoint(ckpts[-1])
    assert round_index == 3 and len(pvec) > 0


def test_rerun_is_byte_identical(tmp_path):
    out = tmp_path / "out"
    spec = validate_spec(write_spec(tmp_path, spec_doc(out)))
    run_experiment(spec)
    report = out / "dlinear/csti/without_sentiment/report.json"
    first = report.read_bytes()
    run_experiment(spec)
    assert report.read_bytes() == first


def test_partial_results_preserved_on_late_failure(tmp_path, monkeypatch):
    out = tmp_path / "out"
    spec = validate_spec(write_spec(tmp_path, spec_doc(out)))

    import csti.experiment as experiment_mod

    def explode(*args, **kwargs):
        raise DivergenceError("boom", stock_id="SYN000")

    monkeypatch.setattr(experiment_mod, "run_csti", explode)
    with pytest.raises(DivergenceError):
        run_experiment(spec)
    # the earlier (normal) cell completed and its files survived
    assert (out / "dlinear/normal/without_sentiment/report.json").is_file()
    assert not (out / "dlinear/csti/without_sentiment/report.json").exists()


def test_csv_source_end_to_end(tmp_path):
    market = generate_synthetic_market(2, 240, 0.6, seed=8)
    csv_dir = tmp_path / "csvs"
    csv_dir.mkdir()
    for series in market:
        save_series_csv(series, csv_dir / f"{series.stock_id}.csv")
    out = tmp_path / "out"
    doc = spec_doc(out, features=["with_sentiment"])
    doc["data"] = {"source": "csv",
                   "paths": [f"csvs/{s.stock_id}.csv" for s in market]}
    spec = validate_spec(write_spec(tmp_path, doc))
    assert spec.stocks == 2
    summary = run_experiment(spec)
    assert len(summary) == 2


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def _run_cli(args, cwd):
    env = dict(os.environ)
    env["PYTHONPATH"] = SRC_DIR + os.pathsep + env.get("PYTHONPATH", "")
    return subprocess.run(
        [sys.executable, "-m", "csti", *args],
        cwd=cwd, env=env, capture_output=True, text=True,
    )


def test_cli_success_exit_code(tmp_path):
    write_spec(tmp_path, spec_doc("out"))
    proc = _run_cli(["spec.json"], cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "out" / "summary.csv").is_file()


def test_cli_validation_exit_code(tmp_path):
    doc = spec_doc("out", models=["timesnet"])
    write_spec(tmp_path, doc)
    proc = _run_cli(["spec.json"], cwd=tmp_path)
    assert proc.returncode == 1
    assert "out of scope" in proc.stderr


def test_cli_missing_spec_exit_code(tmp_path):
    proc = _run_cli(["nope.json"], cwd=tmp_path)
    assert proc.returncode == 1


def test_cli_overrides(tmp_path):
    write_spec(tmp_path, spec_doc("out"))
    proc = _run_cli(
        ["spec.json", "--out", "alt", "--strategy", "normal", "--stocks", "2",
         "--seed", "9"],
        cwd=tmp_path,
    )
    assert proc.returncode == 0, proc.stderr
    report = json.loads((tmp_path / "alt/dlinear/normal/without_sentiment/report.json").read_text())
    assert report["config"]["seed"] == 9
    assert report["config"]["data"]["stocks"] == 2
    assert not (tmp_path / "alt/dlinear/csti").exists()


def test_cli_divergence_exit_code(tmp_path):
    doc = spec_doc("out")
    doc["training"]["learning_rate"] = 80.0
    doc["models"] = ["frets"]
    write_spec(tmp_path, doc)
    proc = _run_cli(["spec.json"], cwd=tmp_path)
    assert proc.returncode == 2
    assert "diverged" in proc.stderr
