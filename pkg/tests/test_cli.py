import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from flowgame.cli import main
from flowgame.config import ConfigError, SCHEMA, load_config, parse_config
from flowgame.density import IpdDensity
from flowgame.trace import DelayModel, IpdModel, jitter_samples, load_trace, synth_flow, write_trace

MODEL = IpdModel.lognormal(-2, 1)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    corpus.mkdir()
    for i in range(100):
        write_trace(synth_flow(MODEL, 30, i), corpus / f"t{i:03d}.txt")
    rng = np.random.default_rng(0)
    dd = jitter_samples(DelayModel(0.05, 0.003), DelayModel(0.05, 0.003), 4000, rng)
    np.savetxt(root / "jitter.txt", dd)
    x = synth_flow(MODEL, 20, 999)
    write_trace(x, root / "x.txt")
    write_trace(x.shifted(0.2), root / "w.txt")
    assert main(["fit", str(corpus), "--delays", str(root / "jitter.txt"), "--seed", "1",
                 "--out", str(root / "dens.json")]) == 0
    assert main(["calibrate", str(root / "x.txt"), "--densities", str(root / "dens.json"), "--levels", "8",
                 "--calib-count", "1000", "--seed", "2", "--out", str(root / "cal.json")]) == 0
    return root


def test_fit_sidecar_round_trip(workspace, tmp_path):
    data = json.loads((workspace / "dens.json").read_text())
    f_dy = IpdDensity.from_dict(data["f_dy"])
    v = np.linspace(-0.1, 1, 200)
    assert np.array_equal(f_dy.log_pdf(v), IpdDensity.from_json(json.dumps(data["f_dy"])).log_pdf(v))
    assert data["meta"]["training_traces"] == 50
    again = tmp_path / "again.json"
    assert main(["fit", str(workspace / "corpus"), "--delays", str(workspace / "jitter.txt"), "--seed", "1",
                 "--out", str(again)]) == 0
    assert again.read_bytes() == (workspace / "dens.json").read_bytes()


def test_fit_errors(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["fit", str(empty), "--out", str(tmp_path / "o.json")]) == 2
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "a.txt").write_text("0.0\nnot-a-number\n")
    assert main(["fit", str(bad), "--out", str(tmp_path / "o.json")]) == 2
    assert "line 2" in capsys.readouterr().err
    flat = tmp_path / "flat"
    flat.mkdir()
    for i in range(4):
        (flat / f"{i}.txt").write_text("1.0\n1.0\n1.0\n")
    assert main(["fit", str(flat), "--out", str(tmp_path / "o.json")]) == 3


def test_detect_self_match_exits_one(workspace, capsys):
    code = main(["detect", str(workspace / "x.txt"), str(workspace / "w.txt"),
                 "--densities", str(workspace / "dens.json"), "--calibration", str(workspace / "cal.json")])
    verdict = json.loads(capsys.readouterr().out)
    assert code == 1 and verdict["accept_h1"] and verdict["lambda"] > verdict["epsilon"]


def test_detect_unrelated_flows_mostly_h0(workspace, tmp_path, capsys):
    y_path = tmp_path / "y.txt"
    codes = []
    for s in range(1000):
        write_trace(synth_flow(MODEL, 20, 50_000 + s), y_path)
        codes.append(main(["detect", str(workspace / "x.txt"), str(y_path),
                           "--densities", str(workspace / "dens.json"),
                           "--calibration", str(workspace / "cal.json")]))
    capsys.readouterr()
    assert set(codes) <= {0, 1}
    assert codes.count(0) >= 970


def test_detect_calibration_problems(workspace, tmp_path):
    args = ["detect", str(workspace / "x.txt"), str(workspace / "w.txt"), "--densities", str(workspace / "dens.json")]
    assert main(args + ["--calibration", str(tmp_path / "missing.json")]) == 5
    assert main(args + ["--calibration", str(workspace / "cal.json"), "--levels", "16"]) == 5
    other = tmp_path / "other.txt"
    write_trace(synth_flow(MODEL, 20, 5), other)
    assert main(["detect", str(other), str(workspace / "w.txt"), "--densities", str(workspace / "dens.json"),
                 "--calibration", str(workspace / "cal.json")]) == 5


def test_attack_respects_budget(workspace, tmp_path, capsys):
    out = tmp_path / "attacked.txt"
    assert main(["attack", str(workspace / "x.txt"), "--densities", str(workspace / "dens.json"),
                 "--adversary", "no1", "--a-max", "0.1", "--p-a", "0.2", "--p-l", "0.1", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["dropped"] == 2 and summary["chaff"] == 4
    assert load_trace(out).n == 22


def _config(tmp_path, **extra):
    doc = {"scenario": "unit", "seed": 4, "n": 20, "ipd_model": {"family": "lognormal", "mu": -2, "sigma": 1},
           "delay_model_1": {"loc": 0.05, "scale": 0.002}, "delay_model_2": {"loc": 0.05, "scale": 0.002},
           "adversary": "none", "detector": {"levels": 8, "eta": 0.05, "calib_count": 400},
           "counts": {"x_count": 3, "repeat_count": 5, "training_ipds": 4000, "jitter_count": 8000}}
    doc.update(extra)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def test_simulate_minimal(tmp_path, capsys):
    cfg = _config(tmp_path)
    out = tmp_path / "res.csv"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "scenario,adversary,n,a_max,p_a,p_l,eta,u_bar,ci_low,ci_high,x_count,repeat_count,seed"
    assert len(lines) == 2 and float(lines[1].split(",")[7]) >= 0.99
    assert "u_bar=" in capsys.readouterr().out
    again = tmp_path / "res2.csv"
    assert main(["simulate", "--config", str(cfg), "--out", str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_simulate_sweep_rows_and_json(tmp_path):
    cfg = _config(tmp_path, adversary="opt-delay", sweep={"axis": "a_max", "values": [0, 0.25, 0.5]},
                  counts={"x_count": 2, "repeat_count": 2, "training_ipds": 4000, "jitter_count": 8000})
    out = tmp_path / "res.json"
    assert main(["simulate", "--config", str(cfg), "--out", str(out), "--format", "json"]) == 0
    rows = json.loads(out.read_text())
    assert [r["a_max"] for r in rows] == [0.0, 0.25, 0.5]


def test_sweep_command_flags(tmp_path):
    cfg = _config(tmp_path, counts={"x_count": 2, "repeat_count": 2, "training_ipds": 4000, "jitter_count": 8000})
    out = tmp_path / "s.csv"
    assert main(["sweep", "--config", str(cfg), "--axis", "adversary", "--values", "none", "rand-delay",
                 "--out", str(out), "--jobs", "1"]) == 0
    assert len(out.read_text().splitlines()) == 3
    assert main(["sweep", "--config", str(cfg), "--axis", "bogus", "--values", "1"]) == 4


@pytest.mark.parametrize("bad", [
    {"ipd_model": {"family": "weibull"}},
    {"n": 1},
    {"detector": {"eta": 0.001, "calib_count": 10}},
    {"budget": {"p_l": 1.5}},
    {"densities": "does-not-exist.json"},
    {"unknown_key": 1},
])
def test_invalid_config_exit_four(tmp_path, bad):
    assert main(["simulate", "--config", str(_config(tmp_path, **bad))]) == 4


def test_config_loader(tmp_path):
    rc = load_config(_config(tmp_path, budget={"a_max": 0.1}, sweep={"axis": "p_l", "values": [0, 0.1]}))
    assert rc.scenario.budget.a_max == 0.1 and rc.sweep_axis == "p_l" and rc.sweep_values == (0, 0.1)
    with pytest.raises(ConfigError):
        parse_config({"ipd_model": {"family": "empirical", "corpus": "nowhere"}}, tmp_path)
    assert SCHEMA["properties"]["sweep"]["properties"]["axis"]["enum"][0] == "a_max"


def test_empirical_model_from_corpus(workspace):
    rc = parse_config({"ipd_model": {"family": "empirical", "corpus": "corpus"}}, workspace)
    assert rc.scenario.ipd_model.family == "empirical" and len(rc.scenario.ipd_model.samples) == 100 * 29


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "flowgame.cli", "detect", "a", "b", "--densities", "x",
                          "--calibration", str(tmp_path / "none.json")], capture_output=True, text=True)
    assert res.returncode == 5


@pytest.mark.parametrize("name", ["delay_sweep.yaml", "chaff_loss.yaml"])
def test_shipped_configs_are_valid(name):
    from pathlib import Path

    rc = load_config(Path(__file__).resolve().parent.parent / "configs" / name)
    assert rc.scenario.n == 20 and rc.sweep_axis is not None
