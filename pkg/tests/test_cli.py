from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from mortproj.cli import dispatch
from mortproj.run import verify_manifest

FIT = ["--chains", "2", "--iters", "400", "--burnin", "200", "--thin", "2"]


def _manifest(path):
    m = json.loads(path.read_text())
    m.pop("created_at")
    return m


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "gen.toml").write_text("seed = 11\nn_age = 3\nn_region = 2\nn_years = 6\n")
    assert dispatch(["simlab", "generate", "--config", str(d / "gen.toml"), "--out", str(d / "syn")]) == 0
    assert dispatch(["fit", "--spec", "lung_female", "--panel", str(d / "syn" / "panel.csv"), "--seed", "7",
                     *FIT, "--out", str(d / "run")]) == 0
    return d


def test_simlab_and_fit_outputs(work):
    assert verify_manifest(work / "syn" / "manifest.json")
    m = json.loads((work / "syn" / "manifest.json").read_text())
    assert "truth" in m and m["seed"] == 11
    assert verify_manifest(work / "run" / "manifest.json")
    for f in ("panel.csv", "schema.json", "spec.json", "summary.csv", "draws/beta.npy"):
        assert (work / "run" / f).exists()
    assert len(list((work / "run").rglob("manifest.json"))) == 1


def test_fit_rerun_gives_identical_manifest(work, tmp_path):
    args = ["fit", "--spec", "lung_female", "--panel", str(work / "syn" / "panel.csv"), "--seed", "7", *FIT,
            "--out", str(tmp_path / "again")]
    assert dispatch(args) == 0
    a, b = _manifest(work / "run" / "manifest.json"), _manifest(tmp_path / "again" / "manifest.json")
    assert a["outputs"] == b["outputs"]
    a["config"].pop("out"), b["config"].pop("out")
    assert a == {**b, "config_hash": a["config_hash"]} and a["config"] == b["config"]


def test_project_scenario_residuals(work):
    out = work / "surf.csv"
    assert dispatch(["project", "--run", str(work / "run"), "--horizon", "2010", "--seed", "3",
                     "--out", str(out)]) == 0
    s = pd.read_csv(out)
    assert {"mean", "lo95", "hi95", "expected_deaths"} <= set(s.columns) and s["year"].min() == 2007
    assert verify_manifest(out.with_name("surf.csv.manifest.json"))
    assert dispatch(["scenario", "--run", str(work / "run"), "--delay-months", "3", "--horizon", "2010",
                     "--seed", "3", "--out", str(work / "excess")]) == 0
    assert (work / "excess" / "national.csv").exists()
    assert verify_manifest(work / "excess" / "manifest.json")
    assert dispatch(["residuals", "--run", str(work / "run"), "--out", str(work / "res.csv"),
                     "--heatmap", str(work / "heat.csv")]) == 0
    assert len(pd.read_csv(work / "res.csv")) == 3 * 2 * 5 * 6


def test_excess_command(work, tmp_path):
    base = pd.read_csv(work / "surf.csv")
    obs = base.groupby(["gender", "region", "year"], as_index=False)["expected_deaths"].sum()
    obs["deaths"] = obs["expected_deaths"].round().astype(int)
    obs["region"] = obs["region"].map({1: "North East", 2: "North West"})
    obs.drop(columns="expected_deaths").to_csv(tmp_path / "obs.csv", index=False)
    assert dispatch(["excess", "--observed", str(tmp_path / "obs.csv"), "--baseline", str(work / "surf.csv"),
                     "--years", "2007-2009", "--out", str(tmp_path / "ced.csv")]) == 0
    t = pd.read_csv(tmp_path / "ced.csv")
    assert "England" in set(t["region"].astype(str)) and t["excess"].abs().max() < 1.0


def test_excess_mismatched_granularity(work, tmp_path, capsys):
    obs = pd.DataFrame({"gender": ["female"], "region": [1], "year": [2007], "ethnicity": [1], "deaths": [3]})
    coarse = pd.DataFrame({"gender": ["female"], "year": [2007], "expected_deaths": [2.0]})
    obs.to_csv(tmp_path / "o.csv", index=False)
    coarse.to_csv(tmp_path / "b.csv", index=False)
    rc = dispatch(["excess", "--observed", str(tmp_path / "o.csv"), "--baseline", str(tmp_path / "b.csv"),
                   "--out", str(tmp_path / "x.csv")])
    assert rc == 1
    assert json.loads(capsys.readouterr().err)["error"] == "AggregationError"


def test_scenario_on_breast_model_fails(tmp_path, capsys):
    (tmp_path / "bc.toml").write_text('seed = 2\ncause = "breast"\nn_age = 2\nn_region = 2\nn_years = 4\n'
                                      'n_deprivation = 3\nterms = ["intercept", "age", "period"]\n'
                                      'psi = {period = -0.0081}\nsigma2_kappa = {period = 0.0004}\n')
    assert dispatch(["simlab", "generate", "--config", str(tmp_path / "bc.toml"), "--out", str(tmp_path / "s")]) == 0
    assert dispatch(["fit", "--spec", str(tmp_path / "s" / "spec.json"), "--panel", str(tmp_path / "s" / "panel.csv"),
                     "--seed", "1", "--chains", "1", "--iters", "200", "--burnin", "100", "--out",
                     str(tmp_path / "r")]) == 0
    capsys.readouterr()
    rc = dispatch(["scenario", "--run", str(tmp_path / "r"), "--delay-months", "6", "--seed", "1",
                   "--out", str(tmp_path / "x")])
    assert rc == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ScenarioUnsupported"


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as e:
        dispatch(["fit", "--bogus"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        dispatch(["teleport"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:  # seed is mandatory
        dispatch(["fit", "--spec", "lung_female", "--panel", "p.csv", "--out", "r"])
    assert e.value.code == 2


def test_ingest_with_data_dir(work, tmp_path, monkeypatch):
    monkeypatch.setenv("MORTPROJ_DATA_DIR", str(work / "syn"))
    assert dispatch(["ingest", "--panel", "panel.csv", "--schema", "schema.json", "--aggregate", "deprivation",
                     "--out", str(tmp_path / "agg")]) == 0
    p = pd.read_csv(tmp_path / "agg" / "panel.csv")
    assert "deprivation" not in p.columns and len(p) == 3 * 2 * 6
    assert verify_manifest(tmp_path / "agg" / "manifest.json")


def test_bad_panel_reports_payload(tmp_path, work, capsys):
    df = pd.read_csv(work / "syn" / "panel.csv").iloc[1:]
    df.to_csv(tmp_path / "p.csv", index=False)
    rc = dispatch(["ingest", "--panel", str(tmp_path / "p.csv"), "--schema", str(work / "syn" / "schema.json"),
                   "--out", str(tmp_path / "o")])
    assert rc == 1
    assert json.loads(capsys.readouterr().err)["error"] == "GridIncomplete"


def test_smoking_and_aad_commands(work, tmp_path):
    # age-specific trends; NS that varies by year alone would be absorbed by the period effect
    rows = [(b, g, t, 0.5 + 0.01 * i + 0.004 * (1 + i) * (t - 2000)) for i, b in enumerate(["16-59", "60+"])
            for g in ("female", "male") for t in range(1998, 2012)]
    pd.DataFrame(rows, columns=["age_band", "gender", "year", "ns_rate"]).to_csv(tmp_path / "ns.csv", index=False)
    assert dispatch(["smoking", "backcast", "--in", str(tmp_path / "ns.csv"), "--out", str(tmp_path / "rec.csv"),
                     "--from", "1975", "--to", "2011"]) == 0
    rec = pd.read_csv(tmp_path / "rec.csv")
    assert rec["year"].min() == 1975 and len(rec) == 2 * 2 * 37
    keys = pd.read_csv(work / "syn" / "panel.csv").drop(columns=["deaths", "exposure"])
    keys["lambda_hat"] = np.random.default_rng(0).uniform(1e-4, 1e-3, len(keys))
    keys.to_csv(tmp_path / "inc.csv", index=False)
    assert dispatch(["aad", "--incidence", str(tmp_path / "inc.csv"), "--panel", str(work / "syn" / "panel.csv"),
                     "--out", str(tmp_path / "aad.csv")]) == 0
    aad = pd.read_csv(tmp_path / "aad.csv")
    assert len(aad) == 2 * 5 and aad["aad"].between(55, 70).all()
    # fit straight from the reconstructed series and AAD file
    assert dispatch(["fit", "--spec", "lung_female", "--panel", str(work / "syn" / "panel.csv"),
                     "--covariates", str(work / "syn" / "covariates"), "--aad", str(tmp_path / "aad.csv"),
                     "--smoking", str(tmp_path / "rec.csv"), "--lag", "5", "--seed", "1", "--chains", "1",
                     "--iters", "200", "--burnin", "100", "--out", str(tmp_path / "run")]) == 0


def test_select_command(tmp_path):
    (tmp_path / "g.toml").write_text('seed = 5\nn_age = 3\nn_region = 2\nn_years = 3\nterms = ["intercept", "age"]\n'
                                     'coefficients = {age = [-0.5, 0.1]}\n')
    assert dispatch(["simlab", "generate", "--config", str(tmp_path / "g.toml"), "--out", str(tmp_path / "s")]) == 0
    (tmp_path / "null.json").write_text(json.dumps({"cause": "lung", "gender": "female", "terms": ["intercept"]}))
    rc = dispatch(["select", "--null", str(tmp_path / "null.json"), "--candidates", "age,deprivation",
                   "--panel", str(tmp_path / "s" / "panel.csv"), "--seed", "4", "--rungs", "6",
                   "--draws-per-rung", "300", "--burnin-per-rung", "50", "--pilot-iters", "800",
                   "--out", str(tmp_path / "trace.csv")])
    assert rc == 0
    t = pd.read_csv(tmp_path / "trace.csv", keep_default_na=False)
    assert list(t["variable_added"]) == ["null", "age"]
    assert {"bayes_factor", "marginal_loglik", "dic", "bayes_factor_display"} <= set(t.columns)
