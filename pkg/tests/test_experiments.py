import json
import math

import numpy as np
import pytest
from scipy import stats

from cellfree_fl import experiments as ex
from cellfree_fl.cli import main

TINY = """
# small sweep used by the tests
M = 3
D = 0.5
case = C1, C2
N_qol = 1
N = 3
trials = 2
n_eval_samples = 2
max_iter = 3
seed = 4
"""


@pytest.fixture(scope="module")
def tiny_cfg():
    return ex.ExperimentConfig.from_text(TINY)


@pytest.fixture(scope="module")
def tiny_rows(tiny_cfg, tmp_path_factory):
    cfg = ex.ExperimentConfig(**{**tiny_cfg.__dict__, "output_dir": str(tmp_path_factory.mktemp("sweep"))})
    return cfg, ex.run_sweep(cfg)


def test_config_parsing(tiny_cfg):
    assert tiny_cfg.M == [3] and tiny_cfg.case == ["C1", "C2"] and tiny_cfg.D == [0.5]
    assert tiny_cfg.trials == 2 and tiny_cfg.sca_eps == 1e-3
    again = ex.ExperimentConfig.from_text(tiny_cfg.to_text())
    assert again == tiny_cfg
    assert again.config_hash() == tiny_cfg.config_hash()


@pytest.mark.parametrize("text", ["M 3", "colour = red", "M =", "schemes = OPT, XYZ", "trials = 0"])
def test_config_errors(text):
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_text(text)


def test_trial_seed_stable_and_distinct():
    s = ex.trial_seed(0, "C1", 20, 1.5, 5, 0)
    assert s == ex.trial_seed(0, "C1", 20, 1.5, 5, 0)
    assert 0 <= s < 2 ** 63
    others = {ex.trial_seed(0, "C1", 20, 1.5, 5, t) for t in range(1, 50)}
    assert s not in others and len(others) == 49


def test_sweep_rows(tiny_rows):
    cfg, rows = tiny_rows
    assert len(rows) == 2 * 2 * 3
    assert all(r["status"] == "ok" for r in rows), [r["error"] for r in rows]
    assert {r["scheme"] for r in rows} == {"OPT", "BL1", "BL2"}
    assert all(r["n_selected"] >= 1 and r["T_e"] > 0 for r in rows)
    on_disk = ex.read_rows(ex.output_dir(cfg) / "results.csv")
    assert [r["T_e"] for r in on_disk] == pytest.approx([r["T_e"] for r in rows], rel=1e-12)
    assert (ex.output_dir(cfg) / "config.txt").read_text().startswith("# config_hash")


def test_sweep_deterministic(tiny_rows):
    cfg, rows = tiny_rows
    first = ex.run_trial(cfg, "C2", 3, 0.5, 1, 1)
    expected = [r for r in rows if r["case"] == "C2" and r["trial"] == 1]
    assert [r["T_e"] for r in first] == [r["T_e"] for r in expected]


def test_failed_rows_for_bad_geometry():
    cfg = ex.ExperimentConfig(M=[300], N=3, N_qol=[1], case=["C1"], trials=1, n_eval_samples=1)
    rows = ex.run_trial(cfg, "C1", 300, 0.5, 1, 0)
    assert len(rows) == 3 and all(r["status"] == "failed" for r in rows)
    assert "ConfigurationError" in rows[0]["error"]


def _row(scheme, T, status="ok", M=20):
    return {"scheme": scheme, "case": "C1", "M": M, "D": 1.5, "N_qol": 5, "T_e": T,
            "n_selected": 5, "status": status}


def test_summary_statistics():
    xs = [10.0, 12.0, 17.0]
    rows = [_row("OPT", x) for x in xs] + [_row("OPT", math.nan, "failed")]
    (agg,) = ex.summarize(rows)
    assert agg["n"] == 3 and agg["failed"] == 1
    assert agg["T_e_mean"] == pytest.approx(13.0)
    assert agg["T_e_std"] == pytest.approx(np.std(xs, ddof=1))
    half = stats.t.interval(0.95, 2, loc=13.0, scale=stats.sem(xs))
    assert agg["T_e_ci95"] == pytest.approx((half[1] - half[0]) / 2)


def test_summary_single_and_empty():
    (agg,) = ex.summarize([_row("BL1", 5.0)])
    assert agg["T_e_std"] == 0.0 and agg["T_e_ci95"] == 0.0
    (agg,) = ex.summarize([_row("BL1", math.nan, "failed")])
    assert agg["n"] == 0 and math.isnan(agg["T_e_mean"])
    with pytest.raises(ValueError):
        ex.summarize([])


def test_plotdata_round_trip_with_gap(tmp_path):
    rows = [_row("OPT", 10.0, M=20), _row("OPT", 12.0, M=20), _row("OPT", 8.0, M=40),
            _row("BL1", 30.0, M=40)]
    paths = ex.emit_plotdata(ex.summarize(rows), "te_vs_M", tmp_path)
    curves = {p.name: p for p in paths if p.suffix == ".csv"}
    assert len(curves) == 2 and (tmp_path / "te_vs_M__plot.txt").exists()
    bl1 = ex.read_plotdata(next(p for n, p in curves.items() if "BL1" in n))
    assert [r["x"] for r in bl1] == [20.0, 40.0]
    assert bl1[0]["marker"] == ex.GAP and math.isnan(bl1[0]["y"])
    assert bl1[1]["y"] == 30.0
    opt = ex.read_plotdata(next(p for n, p in curves.items() if "OPT" in n))
    assert opt[0]["y"] == 11.0 and opt[0]["n"] == 2
    with pytest.raises(ValueError):
        ex.emit_plotdata([], "no_such_figure", tmp_path)


# -- command line -------------------------------------------------------------------------
def test_cli_validate(capsys):
    assert main(["validate"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 6 and all(line.startswith("PASS") for line in out)


def test_cli_generate(tmp_path):
    path = tmp_path / "net.json"
    assert main(["generate", "--M", "4", "--N", "3", "--D", "0.5", "--out", str(path)]) == 0
    data = json.loads(path.read_text())
    assert np.array(data["beta"]).shape == (4, 3)


def test_cli_baseline_and_optimize(capsys):
    args = ["--M", "3", "--N", "3", "--D", "0.5", "--N-qol", "1", "--eval-samples", "2"]
    assert main(["baseline", "--scheme", "BL2", *args]) == 0
    assert json.loads(capsys.readouterr().out)["scheme"] == "BL2"
    assert main(["optimize", "--max-iter", "2", *args]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["iterations"] == 2 and sum(out["a_binary"]) >= 1


def test_cli_sweep_env_override_and_summarize(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "sweep.cfg"
    cfg.write_text(TINY + "trials = 1\ncase = C1\n")
    out = tmp_path / "env_out"
    monkeypatch.setenv(ex.OUTPUT_ENV, str(out))
    assert main(["sweep", "--config", str(cfg), "--schemes", "BL1,BL2"]) == 0
    rows = ex.read_rows(out / "results.csv")
    assert len(rows) == 2 and (out / "summary.csv").exists()
    assert main(["summarize", str(out / "results.csv"), "--figure", "te_vs_M"]) == 0
    assert list((out / "plotdata").glob("te_vs_M__*.csv"))


def test_cli_sweep_exit_code_on_failure(tmp_path, monkeypatch):
    monkeypatch.setenv(ex.OUTPUT_ENV, str(tmp_path))
    assert main(["sweep", "--M", "300", "--D", "0.5", "--case", "C1", "--N", "3", "--N-qol", "1",
                 "--trials", "1", "--schemes", "BL1"]) == 1


def test_cli_rejects_bad_arguments():
    with pytest.raises(SystemExit):
        main(["generate", "--case", "C9"])
