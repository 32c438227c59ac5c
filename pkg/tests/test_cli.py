import csv
import json

import pytest

from fada import cli
from fada import tensor as T

SMALL_RUN = {"rounds": 2, "pretrain_epochs": 1, "batch_size": 32, "attention": {"probe_size": 64},
             "domains": {"sources": [{"n": 200}, {"n": 200, "rotation_deg": 30}],
                         "target": {"n": 200, "rotation_deg": 45}}}


def write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def test_run_writes_artifacts_and_prints_accuracy(tmp_path, capsys):
    cfg = write(tmp_path, "run.json", SMALL_RUN)
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg, "--out", str(out), "--ablation", "II"]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("target_acc=")
    float(line.split("=")[1])
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert {r["node_id"] for r in rows} == {"s0", "s1", "target"}
    assert json.loads((out / "audit.json").read_text())["ok"] is True


def test_run_config_errors_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, "bad.json", {"rounds": -2, "domains": {"target": {"kind": "svhn"}}})
    assert cli.main(["run", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert "rounds" in err and "svhn" in err


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 2


def test_bad_jobs_value(tmp_path):
    assert cli.main(["run", "--jobs", "0"]) == 2


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--instances", "3", "--no-stack"]) == 0
    out = capsys.readouterr().out
    assert out.count("ok") == len(T.PRIMITIVES)


def test_gradcheck_fails_on_a_sign_flipped_relu(monkeypatch, capsys):
    monkeypatch.setattr(T, "_relu_grad", lambda x, g: (-(g * (x > 0)),))
    assert cli.main(["gradcheck", "--instances", "3", "--no-stack"]) == 1
    assert "relu" in capsys.readouterr().err


def test_bound_single_instance(tmp_path):
    cfg = write(tmp_path, "b.json", {"seed": 2, "N": 2, "m": 40})
    assert cli.main(["bound", "--config", cfg, "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "bound.json").read_text())
    assert rep["mode"] == "certified" and rep["total"] >= rep["truth"]


def test_bound_mixture_sweep(tmp_path):
    cfg = write(tmp_path, "b.json", {"sweep": "mixture", "instances": 40})
    assert cli.main(["bound", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "mixture_sweep.csv")))
    assert len(rows) == 40 and all(r["holds"] == "true" for r in rows)


def test_bound_from_a_run_directory_is_estimated(tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert cli.main(["run", "--config", write(tmp_path, "run.json", SMALL_RUN), "--out", str(run_dir)]) == 0
    cfg = write(tmp_path, "b.json", {"run_dir": str(run_dir)})
    assert cli.main(["bound", "--config", cfg, "--out", str(tmp_path / "bound")]) == 0
    rep = json.loads((tmp_path / "bound" / "bound.json").read_text())
    assert rep["mode"] == "estimated" and rep["truth"] is None
    assert "estimated" in capsys.readouterr().err


def test_datagen_round_trips_through_csv_domains(tmp_path):
    gen = tmp_path / "gen"
    assert cli.main(["datagen", "--config", write(tmp_path, "run.json", SMALL_RUN), "--out", str(gen)]) == 0
    cfg = dict(SMALL_RUN, domains={"sources": [{"kind": "csv", "path": str(gen / "s0.csv")}],
                                   "target": {"kind": "csv", "path": str(gen / "target.csv")}})
    assert cli.main(["run", "--config", write(tmp_path, "csv.json", cfg), "--out", str(tmp_path / "o")]) == 0


def test_missing_csv_is_a_config_or_data_error(tmp_path):
    cfg = dict(SMALL_RUN, domains={"sources": [{"kind": "csv", "path": str(tmp_path / "nope.csv")}]})
    assert cli.main(["run", "--config", write(tmp_path, "c.json", cfg), "--out", str(tmp_path / "o")]) == 2
