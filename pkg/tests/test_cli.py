import csv
import hashlib
import json

import pytest

from platoon_smpc.cli import CYCLE_FIELDS, PLOT_HEADER, main

ORACLE_SCENARIO = {"predictor": {"source": "oracle", "disturbance": "oracle"}, "duration": 12.0}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    assert main(["gen-data", "--n-maneuvers", "12", "--seed", "3", "--out", str(base / "data")]) == 0
    assert main(["train", "--data", str(base / "data"), "--epochs", "20", "--seed", "1", "--out", str(base / "m")]) == 0
    return base


def test_gen_data_minimal(tmp_path):
    assert main(["gen-data", "--n-maneuvers", "1", "--out", str(tmp_path)]) == 0
    names = sorted(p.name for p in tmp_path.glob("*.csv"))
    assert sum(n.startswith("lane_change_") for n in names) == 1
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["command"] == "gen-data" and man["seed"] == 0 and len(man["input_hash"]) == 64


def test_gen_data_rejects_zero(tmp_path, capsys):
    assert main(["gen-data", "--n-maneuvers", "0", "--out", str(tmp_path)]) == 1
    assert "n_maneuvers" in capsys.readouterr().err


def test_train_outputs(model_dir):
    report = json.loads((model_dir / "m" / "report.json").read_text())
    assert len(report["lat_halfwidth"]) == 10 and len(report["long_halfwidth"]) == 10
    assert all(b >= a for a, b in zip(report["lat_halfwidth"], report["lat_halfwidth"][1:]))
    man = json.loads((model_dir / "m" / "manifest.json").read_text())
    assert man["command"] == "train" and man["resolved_config"]["epochs"] == 20


def test_train_same_seed_same_model(model_dir, tmp_path):
    assert main(["train", "--data", str(model_dir / "data"), "--epochs", "20", "--seed", "1", "--out", str(tmp_path)]) == 0
    digest = [hashlib.sha256((d / "model.json").read_bytes()).hexdigest() for d in (model_dir / "m", tmp_path)]
    assert digest[0] == digest[1]


def test_run_outputs(model_dir, tmp_path):
    cfg = _write(tmp_path / "scenario.json", {"duration": 12.0})
    model = model_dir / "m" / "model.json"
    assert main(["run", "--config", str(cfg), "--model", str(model), "--out", str(tmp_path / "out")]) == 0
    out = tmp_path / "out"
    with open(out / "plot_data.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == PLOT_HEADER == ("t", "series", "variant", "value")
    assert {r[1] for r in rows[1:]} == {"delta", "v", "a", "pc"}
    for series in ("delta", "v", "a", "pc"):
        assert {r[2] for r in rows[1:] if r[1] == series} == {"smpc", "mpc"}
    with open(out / "cycles.csv") as fh:
        assert tuple(next(csv.reader(fh))) == CYCLE_FIELDS
    metrics = json.loads((out / "metrics.json").read_text())["metrics"]
    assert metrics["smpc"]["max_abs_delta"] < metrics["mpc"]["max_abs_delta"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["resolved_config"]["predictor_model_path"] == str(model)


def test_equilibrium_run_is_flat(tmp_path):
    cfg = _write(tmp_path / "s.json", {"interferer": {"enabled": False}, "predictor": {"disturbance": "zero"}})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    with open(tmp_path / "o" / "plot_data.csv") as fh:
        deltas = [float(r["value"]) for r in csv.DictReader(fh) if r["series"] == "delta"]
    assert max(abs(d) for d in deltas) < 0.01


def test_malformed_scenario_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.json", {"platoon": {"speed": "fast"}, "extra": 1})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "platoon.speed" in err and "extra" in err


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    cfg = _write(tmp_path / "s.json", ORACLE_SCENARIO)
    assert main(["run", "--config", str(cfg), "--out", str(blocker / "sub")]) == 1


def test_degenerate_sweep_matches_run(tmp_path):
    cfg = _write(tmp_path / "s.json", ORACLE_SCENARIO)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert main(["sweep", "--config", str(cfg), "--param", "controller.alpha=50", "--out", str(tmp_path / "sw")]) == 0
    run = json.loads((tmp_path / "run" / "metrics.json").read_text())["metrics"]
    cells = json.loads((tmp_path / "sw" / "sweep.json").read_text())["cells"]
    assert len(cells) == 1 and cells[0]["metrics"] == run


def test_alpha_sweep_rows(tmp_path):
    cfg = _write(tmp_path / "s.json", ORACLE_SCENARIO)
    argv = ["sweep", "--config", str(cfg), "--param", "controller.alpha=10,50", "--out", str(tmp_path / "sw")]
    assert main(argv + ["--jobs", "2"]) == 0
    with open(tmp_path / "sw" / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert sorted((r["controller.alpha"], r["variant"]) for r in rows) == [
        ("10", "mpc"), ("10", "smpc"), ("50", "mpc"), ("50", "smpc"),
    ]
    serial = tmp_path / "serial"
    assert main(argv[:-1] + [str(serial)]) == 0
    assert (serial / "sweep.json").read_text() == (tmp_path / "sw" / "sweep.json").read_text()


def test_sweep_rejects_bad_cell_before_running(tmp_path):
    cfg = _write(tmp_path / "s.json", ORACLE_SCENARIO)
    argv = ["sweep", "--config", str(cfg), "--param", "controller.nope=1,2", "--out", str(tmp_path / "sw")]
    assert main(argv) == 2
    assert not (tmp_path / "sw").exists()
