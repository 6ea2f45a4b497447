import json
import subprocess
import sys

import numpy as np
import pytest

import oracles as orc
from sltkit import cli, zoo


def run(argv, capsys):
    code = cli.main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_rlct_charts(tmp_path, capsys):
    p = tmp_path / "charts.json"
    p.write_text('[{"k":[1,1],"h":[0,0]}]')
    code, out, _ = run(["rlct", str(p)], capsys)
    assert code == 0 and out.strip() == "lambda=1/2 m=2"
    code, out, _ = run(["rlct", str(p), "--json"], capsys)
    assert json.loads(out)["lambda"] == {"num": 1, "den": 2}
    q = tmp_path / "reg.json"
    q.write_text('[{"k":[1],"h":[0]}]')
    code, out, _ = run(["rlct", str(p), str(q), "--compose", "sum"], capsys)
    assert out.strip().splitlines()[-1] == "sum: lambda=1"


def test_rlct_bad_chart_is_usage_error(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('[{"k":[0,0],"h":[0,0]}]')
    code, _, err = run(["rlct", str(p)], capsys)
    assert code == 2 and "error" in err


def test_unknown_flag_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["rlct", "--bogus"])
    assert exc.value.code == 2


def test_help_for_each_subcommand(capsys):
    for sub in ("gen", "sample", "criteria", "wbic", "rlct", "renorm", "experiment", "report"):
        with pytest.raises(SystemExit) as exc:
            cli.main([sub, "--help"])
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out


def test_config_parse_error_exit_2(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{\n  "model": "product",\n  "n_values": [10]\n  "replicates": 2\n}')
    code, _, err = run(["experiment", str(p)], capsys)
    assert code == 2 and "line 4" in err
    p.write_text(json.dumps({"model": "product", "n_values": [10], "replicates": -1, "estimators": ["T"]}))
    code, _, err = run(["experiment", str(p)], capsys)
    assert code == 2 and "replicates" in err


def test_runtime_error_exit_1(tmp_path, capsys):
    code, _, err = run(["sample", "--model", "product", "--data", str(tmp_path / "missing.csv")], capsys)
    assert code == 1 and "error" in err


def test_gen_and_sample(tmp_path, capsys):
    code, out, _ = run(["gen", "--model", "product", "--n", "5", "--seed", "3"], capsys)
    lines = out.strip().splitlines()
    assert code == 0 and lines[0] == "x1" and len(lines) == 6
    path = tmp_path / "d.csv"
    run(["gen", "--model", "product", "--n", "20", "--seed", "3", "--out", str(path)], capsys)
    assert json.loads(path.with_suffix(".json").read_text())["n"] == 20
    code, out, _ = run(["sample", "--model", "product", "--data", str(path), "--draws-per-chain", "100", "--out", str(tmp_path / "c.csv")], capsys)
    assert code == 0 and "rhat" in json.loads(out)
    assert (tmp_path / "c.csv").exists() and (tmp_path / "c.diagnostics.json").exists()


def test_criteria_conjugate_matches_oracle(capsys):
    code, out, _ = run(["criteria", "--model", "conjugate", "--n", "20", "--seed", "1"], capsys)
    assert code == 0
    rep = json.loads(out)
    x = zoo.generate_data(zoo.conjugate_normal(), 20, 1).observations
    assert abs(rep["T_n"] - orc.conj_training(x)) < 4 * rep["T_mcse"]
    assert abs(rep["C_n"] - orc.conj_loo_refit(x)) < 4 * rep["C_mcse"]
    w_exact = orc.conj_training(x) + orc.conj_functional_variance(x)
    assert abs(rep["W_n"] - w_exact) < 4 * rep["W_mcse"]


def test_wbic_and_renorm(capsys, tmp_path):
    code, out, _ = run(["wbic", "--model", "regular", "--n", "100", "--draws-per-chain", "300"], capsys)
    assert code == 0 and np.isfinite(json.loads(out)["WBIC"])
    code, out, _ = run(["renorm", "--check", "partial", "--draws", "20"], capsys)
    assert code == 0 and max(json.loads(out).values()) < 1e-8
    g = tmp_path / "grid.json"
    g.write_text(json.dumps({"lambda": 1.0, "nodes": [[0.0], [1.0]], "weights": [0.5, 0.5], "covariance": [[1.0, 0.3], [0.3, 1.0]]}))
    code, out, _ = run(["renorm", str(g), "--check", "identity", "--draws", "500"], capsys)
    res = json.loads(out)
    assert code == 0 and abs(res["lhs"] - res["rhs"]) < 4 * res["stderr"]
    code, out, _ = run(["renorm", "--check", "chi", "--draws", "50"], capsys)
    assert code == 0 and "mean" in json.loads(out)


def test_experiment_and_report(tmp_path, capsys):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({
        "model": "product", "n_values": [20, 40], "replicates": 3, "estimators": ["T", "C", "W", "G", "nu"],
        "test_n": 1000, "mcmc": {"draws_per_chain": 200},
    }))
    out = tmp_path / "out"
    code, text, _ = run(["experiment", str(cfg), "--out", str(out), "--seed", "4"], capsys)
    assert code == 0 and text.startswith("model,n,estimator,mean,stderr,count")
    for name in ("summary.csv", "raw.csv", "manifest.json", "laws.csv"):
        assert (out / name).exists()
    code, text, err = run(["report", str(out)], capsys)
    assert code == 0 and text.startswith("law,n,predicted,observed,stderr")
    pngs = sorted(p.name for p in (out / "figures").glob("*.png"))
    assert "laws.png" in pngs and "scaling.png" in pngs
    code, _, err = run(["report", str(tmp_path / "nothing")], capsys)
    assert code == 2


def test_console_script_entry_point(tmp_path):
    p = tmp_path / "charts.json"
    p.write_text('[{"k":[2],"h":[3]}]')
    res = subprocess.run([sys.executable, "-m", "sltkit.cli", "rlct", str(p)], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == "lambda=1 m=1"
