import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fedload.cli import decode_model, encode_model, main
from fedload.errors import FedloadError
from fedload.model import ModelArch, init_params

SMALL = ["--clients", "4", "--days", "6", "--window", "12", "--seed", "3"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _metrics(path):
    return [{k: v for k, v in r.items() if k != "wall_time_s"} for r in _rows(path)]


def _tree(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*"))


def test_gen_data_writes_inputs(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--clients", "3", "--days", "2", "--seed", "1"]) == 0
    assert _tree(tmp_path / "d") == ["manifest.json", "readings.csv", "weather.csv"]
    assert _rows(tmp_path / "d" / "readings.csv")[0].keys() >= {"household_id", "timestamp", "kwh"}

    assert main(["gen-data", "--out", str(tmp_path / "r"), "--clients", "4", "--days", "2", "--regime", "regimes"]) == 0
    labels = _rows(tmp_path / "r" / "labels.csv")
    assert len(labels) == 4 and {r["regime"] for r in labels} == {"0", "1"}
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--clients", "3", "--regime", "regimes"]) == 2


def test_simulate_outputs_stay_inside_out(tmp_path):
    out = tmp_path / "run"
    before = _tree(tmp_path)
    assert main(["simulate", *SMALL, "--rounds", "2", "--out", str(out)]) == 0
    assert set(_tree(tmp_path)) - set(before) == {"run", *(f"run/{n}" for n in _tree(out))}
    assert set(_tree(out)) == {
        "manifest.json",
        "history.csv",
        "history.json",
        "model.bin",
        "baseline_history.csv",
        "baseline_history.json",
        "baseline_model.bin",
        "comparison.csv",
        "comparison.json",
    }
    rows = _rows(out / "history.csv")
    assert [r["round"] for r in rows] == ["0", "1", "2"]
    # strict JSON, no NaN tokens
    json.loads((out / "comparison.json").read_text(), parse_constant=lambda c: pytest.fail(c))


def test_simulate_from_csv_files(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), "--clients", "3", "--days", "6", "--seed", "3"]) == 0
    out = tmp_path / "run"
    args = ["simulate", "--readings", str(data / "readings.csv"), "--weather", str(data / "weather.csv")]
    assert main(args + ["--window", "12", "--rounds", "1", "--no-baseline", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["inputs"]["readings"]["sha256"]) == 64
    assert not (out / "baseline_model.bin").exists()

    # the manifest pins its input files
    with open(data / "readings.csv", "a") as fh:
        fh.write("H9,2013-01-01 00:00:00,0.5\n")
    assert main(["simulate", "--config", str(out / "manifest.json"), "--out", str(tmp_path / "again")]) == 2


def test_config_file_then_flags(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"rounds": 2, "clients": 4, "days": 6, "window": 12}))
    assert main(["simulate", "--config", str(cfg), "--no-baseline", "--out", str(tmp_path / "a")]) == 0
    assert len(_rows(tmp_path / "a" / "history.csv")) == 3
    assert main(["simulate", "--config", str(cfg), "--rounds", "1", "--no-baseline", "--out", str(tmp_path / "b")]) == 0
    assert len(_rows(tmp_path / "b" / "history.csv")) == 2


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate"],
        ["simulate", "--out", "x", "--no-such-flag"],
        ["simulate", "--out", "x", "--batch", "huge"],
        ["frobnicate"],
        ["simulate", "--out", "OUT", "--readings", "r.csv"],
        ["simulate", "--out", "OUT", "--cluster-k", "2"],
    ],
)
def test_usage_errors_exit_1(argv, tmp_path, capsys):
    argv = [str(tmp_path / "o") if a == "OUT" else a for a in argv]
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_config_key_exits_1(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"roundz": 2}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_missing_input_file_exits_2(tmp_path):
    args = ["simulate", "--readings", str(tmp_path / "nope.csv"), "--weather", str(tmp_path / "w.csv")]
    assert main(args + ["--out", str(tmp_path / "o")]) == 2


def test_evaluate_reproduces_history(tmp_path):
    run = tmp_path / "run"
    assert main(["simulate", *SMALL, "--rounds", "2", "--out", str(run)]) == 0
    assert main(["evaluate", str(run / "model.bin"), *SMALL, "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "eval.json").read_text())
    final = _rows(run / "history.csv")[-1]
    assert report["mape_pct"] == pytest.approx(float(final["test_mape"]), rel=1e-12)
    assert len(report["per_client"]) == 4
    assert main(["evaluate", str(run / "model.bin"), *SMALL, "--on", "val", "--out", str(tmp_path / "ev2")]) == 0
    val = json.loads((tmp_path / "ev2" / "eval.json").read_text())
    assert val["mape_pct"] == pytest.approx(float(final["val_mape"]), rel=1e-12)
    # a model trained on W=12 refuses W=24 windows
    assert main(["evaluate", str(run / "model.bin"), "--window", "24", "--out", str(tmp_path / "ev3")]) == 2


def test_compare_histories(tmp_path):
    run = tmp_path / "run"
    assert main(["simulate", *SMALL, "--rounds", "2", "--out", str(run)]) == 0
    assert main(["compare", str(run / "baseline_history.json"), str(run / "history.json"), "--out", str(tmp_path / "c")]) == 0
    rows = _rows(tmp_path / "c" / "comparison.csv")
    assert len(rows) == 3
    assert any(k.startswith("delta.") for k in rows[0])


def test_model_file_round_trip():
    arch = ModelArch("lstm", 7, 5, 2, 3)
    vecs = [init_params(arch, 0), init_params(arch, 1)]
    blob = encode_model(arch, vecs, {"clusters": [[0], [1]]})
    back_arch, back, header = decode_model(blob)
    assert back_arch == arch and header["clusters"] == [[0], [1]]
    assert all(np.array_equal(a.values, b.values) for a, b in zip(vecs, back))
    with pytest.raises(FedloadError):
        decode_model(b"NOPE" + blob[4:])
    with pytest.raises(FedloadError):
        decode_model(blob + b"\0")


def test_version_flag(capsys):
    assert main(["--version"]) == 0
    assert "fedload" in capsys.readouterr().out


def test_serve_and_clients_as_processes_match_simulate(tmp_path):
    common = ["--clients", "4", "--window", "12", "--seed", "3", "--rounds", "2", "--fraction", "0.5"]
    assert main(["simulate", *common, "--days", "6", "--no-baseline", "--out", str(tmp_path / "sim")]) == 0
    # the server holds no data, so it takes no --days
    server = subprocess.Popen(
        [sys.executable, "-m", "fedload", "serve", *common, "--bind", "127.0.0.1:0", "--join-timeout", "60", "--out", str(tmp_path / "net")],
        stdout=subprocess.PIPE,
        text=True,
    )
    try:
        line = server.stdout.readline()
        assert line.startswith("listening on ")
        addr = line.split()[-1]
        clients = [
            subprocess.Popen([sys.executable, "-m", "fedload", "client", *SMALL, "--server", addr, "--client-id", str(i)])
            for i in range(4)
        ]
        assert [c.wait(120) for c in clients] == [0, 0, 0, 0]
        assert server.wait(120) == 0
    finally:
        server.kill()
        server.stdout.close()
    assert _metrics(tmp_path / "net" / "history.csv") == _metrics(tmp_path / "sim" / "history.csv")
    assert (tmp_path / "net" / "model.bin").exists()
    assert json.loads((tmp_path / "net" / "manifest.json").read_text())["config"]["failure_policy"] == "drop"
