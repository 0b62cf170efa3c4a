import csv
import json
from pathlib import Path

import pytest

from qlpv_rci.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO, EXIT_OK, SUMMARY_HEADER, main
from qlpv_rci.experiment import ConfigError, RunConfig, trace_report

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SMOKE = str(CONFIGS / "smoke.json")


def write_config(tmp_path, **over):
    with open(SMOKE) as fh:
        d = json.load(fh)
    d["out"] = str(tmp_path / "out")
    d.update(over)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(d))
    return str(p)


def test_run_config_validation():
    with pytest.raises(ConfigError, match="unknown config key bogus"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="data.nope"):
        RunConfig.from_dict({"data": {"nope": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"tau": -1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"Y": {"lo": [1.0], "hi": [0.0]}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"zeta_sweep": [0.0]})


def test_run_config_hash():
    a, b = RunConfig.from_dict({"seed": 3}), RunConfig.from_dict({"seed": 3})
    assert a.hash() == b.hash() and len(a.hash()) == 16
    assert RunConfig.from_dict({"seed": 4}).hash() != a.hash()
    assert a.train_config().seed == 3
    for name in ("smoke", "desk", "full"):
        RunConfig.load(CONFIGS / f"{name}.json")


def test_trace_report():
    rep = trace_report([3.0, 2.5, 2.6, 2.0, 2.0 + 5e-7])
    assert not rep["monotone"] and rep["n_increases"] == 1
    assert rep["max_increase"] == pytest.approx(0.1)
    assert trace_report([3.0, 2.0, 2.0])["monotone"]


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"bogus": 1}')
    assert main(["gen-data", "--config", str(bad)]) == EXIT_CONFIG
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["gen-data", "--config", str(tmp_path / "missing.json")]) == EXIT_IO
    assert main(["report", str(tmp_path / "nope.json")]) == EXIT_IO
    assert main(["rci", "--config", SMOKE, "--checkpoint", str(tmp_path / "x.json")]) == EXIT_IO
    capsys.readouterr()
    assert main(["report"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out == ["| " + " | ".join(SUMMARY_HEADER) + " |", "|" + "---|" * len(SUMMARY_HEADER)]


def test_gen_data_refuses_overwrite(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", cfg, "--points", "20"]) == EXIT_OK
    assert main(["gen-data", "--config", cfg, "--points", "20"]) == EXIT_IO
    assert main(["gen-data", "--config", cfg, "--points", "20", "--force"]) == EXIT_OK


@pytest.mark.slow
def test_identify_infeasible_exit(tmp_path):
    cfg = write_config(tmp_path, Y={"lo": [-1e-4], "hi": [1e-4]},
                       train={"l_hat": 1, "pretrain_iters": 20})
    assert main(["gen-data", "--config", cfg, "--points", "100"]) == EXIT_OK
    assert main(["identify", "--config", cfg]) == EXIT_INFEASIBLE


@pytest.mark.slow
def test_smoke_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["gen-data", "--config", cfg]) == EXIT_OK
    assert main(["identify", "--config", cfg, "--strict-determinism"]) == EXIT_OK
    ck = out / "identify" / "alg1_zeta_0.05.json"
    assert ck.exists()
    log = (out / "identify" / "alg1_zeta_0.05_log.csv").read_text().splitlines()
    assert log[0].startswith("# config_hash=") and len(log) == 2 + 5
    assert main(["rci", "--config", cfg, "--checkpoint", str(ck)]) == EXIT_OK
    assert json.loads((out / "rci" / "verify.json").read_text())["passed"]
    assert main(["simulate", "--config", cfg, "--checkpoint", str(ck),
                 "--rci", str(out / "rci" / "rci.json")]) == EXIT_OK
    with open(out / "simulate" / "closed_loop.csv") as fh:
        rows = [r for r in csv.reader(fh) if not r[0].startswith("#")]
    assert len(rows) == 1 + 60 and all(r[-1] == "Optimal" for r in rows[1:])
    capsys.readouterr()
    assert main(["report", str(ck), str(out / "config.effective.json")]) == EXIT_OK
    captured = capsys.readouterr()
    assert "alg1_zeta_0.05" in captured.out and "skipping" in captured.err
