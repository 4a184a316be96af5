import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from causalpanel.cli import RunConfig, _build_section, main, parse_filter
from causalpanel.core import read_panel_csv
from causalpanel.simulate import synthetic_survey

from conftest import long_frame

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run_ok(*argv):
    assert main([str(a) for a in argv]) == 0


def read_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def sim_panel(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    run_ok("simulate", "--out-dir", d, "--n-units", 300, "--seed", 3, "--outcome-kind", "linear")
    return d / "panel.csv"


@pytest.fixture(scope="module")
def survey_csv(tmp_path_factory):
    p = tmp_path_factory.mktemp("survey") / "survey.csv"
    synthetic_survey(600, seed=2).to_csv(p, index=False)
    return p


# ---------------------------------------------------------------------------
# reconstruct / policies
# ---------------------------------------------------------------------------


def test_personas_give_three_by_26(tmp_path, fixtures_dir):
    run_ok("reconstruct", "--survey", fixtures_dir / "personas.csv", "--config",
           fixtures_dir / "personas_config.json", "--out-dir", tmp_path)
    panel = read_panel_csv(tmp_path / "panel.csv")
    sizes = panel.frame.groupby("unit_id").size()
    assert dict(sizes) == {"current": 26, "former": 26, "never": 26}
    assert panel.frame["age"].min() == 15 and panel.frame["age"].max() == 40
    f = panel.frame.set_index(["unit_id", "age"])["outcome"]
    assert f.loc["former"].loc[20:30].eq(1).all() and f.loc["former"].loc[31:].eq(0).all()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["sections"]["reconstruction"]["earliest_year"] == 1977
    assert set(manifest["outputs"]) == {"panel.csv", "exclusions.json"}


def test_empty_survey_fails_without_output(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("respondent_id,survey_year,age,gender,region_id,status,init_age,cess_age,cess_lo,cess_hi\n")
    out = tmp_path / "out"
    assert main(["reconstruct", "--survey", str(empty), "--out-dir", str(out)]) == 1
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_history_cap_recount(tmp_path, survey_csv):
    run_ok("reconstruct", "--survey", survey_csv, "--history-cap", 5, "--out-dir", tmp_path, "--composition")
    frame = pd.read_csv(tmp_path / "panel.csv")
    span = frame.groupby("unit_id")["year"].agg(lambda y: y.max() - y.min() + 1)
    assert span.max() <= 5 and frame.groupby("unit_id").size().max() <= 5
    assert (tmp_path / "composition.csv").exists()
    excl = json.loads((tmp_path / "exclusions.json").read_text())
    assert excl["excluded_unknown_status"] > 0


def test_reconstruct_codes_treatment(tmp_path, survey_csv):
    run_ok("reconstruct", "--survey", survey_csv, "--out-dir", tmp_path)
    panel = read_panel_csv(tmp_path / "panel.csv")
    zh = panel.frame[panel.frame["region_id"] == "ZH"]
    assert (zh["treated"] == (zh["year"] >= 2008)).all()


def test_policies(tmp_path):
    run_ok("policies", "--out-dir", tmp_path)
    first = pd.read_csv(tmp_path / "first_years.csv")
    bb = first[first["policy_kind"] == "billboard_ban"].set_index("region_id")["first_year"]
    assert (bb["BS"], bb["ZH"], bb["OW"]) == (1997, 2008, 2016)
    adoption = pd.read_csv(tmp_path / "adoption.csv")
    row = adoption[(adoption["policy_kind"] == "billboard_ban") & (adoption["year"] == 2017)]
    assert int(row["regions_treated"].iloc[0]) == 16


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


def test_did_two_by_two(tmp_path):
    Y = np.array([[0.5, 0.45], [0.5, 0.45], [0.5, 0.49], [0.5, 0.49]])
    frame = long_frame(Y, np.array([2001, 2001, 0, 0]), [2000, 2001])
    p = tmp_path / "p.csv"
    frame.to_csv(p, index=False)
    run_ok("estimate", "--panel", p, "--outcome-kind", "continuous", "--out-dir", tmp_path / "o")
    cells = pd.read_csv(tmp_path / "o" / "cells.csv")
    assert len(cells) == 1 and cells["estimate"].iloc[0] == pytest.approx(-0.04, abs=1e-10)


def test_estimate_outputs(tmp_path, sim_panel):
    run_ok("estimate", "--panel", sim_panel, "--outcome-kind", "continuous", "--out-dir", tmp_path)
    es = pd.read_csv(tmp_path / "event_study.csv")
    assert list(es.columns) == ["event_time", "estimate", "std_error", "p_value", "ci_lo", "ci_hi",
                                "n_treated", "n_cohorts"]
    assert es["event_time"].min() == -10 and es["event_time"].max() == 5
    windows = pd.read_csv(tmp_path / "windows.csv")
    assert windows.set_index("window").loc["0-3", "estimate"] == pytest.approx(-0.05, abs=0.02)
    t4 = pd.read_csv(tmp_path / "table4.csv")
    assert list(t4["statistic"][:3]) == ["ATET", "std_error", "p_value"]
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert {"seed", "config_hash", "inputs", "versions"} <= set(m)
    assert m["inputs"]["panel"]["sha256"]


def test_ifect_rank_zero_matches_library(tmp_path, sim_panel):
    from causalpanel.ifect import IfectConfig, estimate_ifect

    run_ok("estimate", "--panel", sim_panel, "--outcome-kind", "continuous", "--method", "ifect",
           "--max-rank", 0, "--bootstrap-reps", 0, "--out-dir", tmp_path)
    es = pd.read_csv(tmp_path / "event_study.csv")
    lib = estimate_ifect(read_panel_csv(sim_panel, binary_outcome=False), IfectConfig(max_rank=0, bootstrap_reps=0))
    np.testing.assert_allclose(es["estimate"], lib.event_study.table["estimate"], rtol=1e-9)
    assert json.loads((tmp_path / "ifect_summary.json").read_text())["rank"] == 0


def test_filter_restricts_rows(tmp_path, sim_panel):
    run_ok("estimate", "--panel", sim_panel, "--outcome-kind", "continuous", "--filter", "gender == 1",
           "--out-dir", tmp_path / "a")
    run_ok("estimate", "--panel", sim_panel, "--outcome-kind", "continuous", "--out-dir", tmp_path / "b")
    a = pd.read_csv(tmp_path / "a" / "event_study.csv")
    b = pd.read_csv(tmp_path / "b" / "event_study.csv")
    assert (a["n_treated"] < b["n_treated"]).all()
    assert parse_filter("age >= 45") == ("age", ">=", 45.0)
    assert parse_filter("region_id == 'ZH'") == ("region_id", "==", "ZH")


def test_estimation_error_exit_status(tmp_path, sim_panel, capsys):
    code = main(["estimate", "--panel", str(sim_panel), "--outcome-kind", "continuous",
                 "--covariates", "nope", "--out-dir", str(tmp_path / "o")])
    assert code == 1 and not (tmp_path / "o").exists()
    code = main(["estimate", "--panel", str(sim_panel), "--out-dir", str(tmp_path / "o")])
    assert code == 1 and "NonBinaryOutcome" in capsys.readouterr().err


def test_output_may_not_overwrite_input(tmp_path, capsys):
    spec = tmp_path / "truth.json"
    spec.write_text(json.dumps({"n_units": 50}))
    before = spec.read_bytes()
    assert main(["simulate", "--out-dir", str(tmp_path), "--spec", str(spec)]) == 1
    assert "overwrite" in capsys.readouterr().err
    assert spec.read_bytes() == before and not (tmp_path / "panel.csv").exists()


def test_config_precedence(tmp_path, sim_panel):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "did": {"control_group": "never_treated", "event_window": [0, 2]},
                               "outcome_kind": "continuous"}))
    run_ok("estimate", "--panel", sim_panel, "--config", cfg, "--window", 0, 3, "--out-dir", tmp_path / "o")
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    did = m["config"]["sections"]["did"]
    assert did["control_group"] == "never_treated"
    assert did["event_window"] == [0, 3]
    assert m["seed"] == 5
    # the manifest can be fed back as a config and reproduces the outputs
    run_ok("estimate", "--panel", sim_panel, "--config", tmp_path / "o" / "manifest.json", "--out-dir", tmp_path / "r")
    assert read_bytes(tmp_path / "o") == read_bytes(tmp_path / "r")


def test_unknown_config_key(tmp_path, sim_panel):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"did": {"contro_group": "never_treated"}}))
    assert main(["estimate", "--panel", str(sim_panel), "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 1


def test_run_config_round_trip():
    run = RunConfig("estimate", 4, {"did": _build_section("did", {"covariates": ["a"], "improved": True}),
                                    "ifect": _build_section("ifect", {"max_rank": 2}),
                                    "dgp": _build_section("dgp", {"cohort_shares": {"2005": 0.8}})},
                    {"windows": "0-1"}, {"in_panel": "x.csv"})
    again = RunConfig.from_dict(json.loads(json.dumps(run.to_dict())))
    assert again.to_dict() == run.to_dict() and again.hash() == run.hash()
    assert again.sections["did"] == run.sections["did"]


# ---------------------------------------------------------------------------
# simulate / benchmark / sweep
# ---------------------------------------------------------------------------


def test_simulate_then_estimate(tmp_path):
    run_ok("simulate", "--out-dir", tmp_path / "s")
    truth = json.loads((tmp_path / "s" / "truth.json").read_text())
    assert set(truth) == {"atet_e", "n_e", "atet_gt", "cohort_sizes"}
    run_ok("estimate", "--panel", tmp_path / "s" / "panel.csv", "--out-dir", tmp_path / "e")


def test_benchmark(tmp_path):
    spec = tmp_path / "b.json"
    spec.write_text(json.dumps({"reps": 3, "specs": {"null": {"n_units": 200, "seed": 1}},
                                "estimators": {"did": {"method": "did"}}}))
    run_ok("benchmark", "--spec", spec, "--out-dir", tmp_path / "o", "--timings")
    report = pd.read_csv(tmp_path / "o" / "report.csv")
    assert set(report["event_time"]) == set(range(-10, 6))
    assert (report["n_reps"] == 3).all()
    assert (tmp_path / "o" / "timings.csv").exists()


def test_checked_in_configs_parse():
    for name in ("benchmark_null.json", "benchmark_factor.json", "table4_sweep.json"):
        doc = json.loads((CONFIGS / name).read_text())
        assert doc
    sweep = json.loads((CONFIGS / "table4_sweep.json").read_text())
    assert [c["name"] for c in sweep["columns"]] == [f"({i})" for i in range(1, 11)]


def test_sweep_from_survey(tmp_path, survey_csv):
    sweep = json.loads((CONFIGS / "table4_sweep.json").read_text())
    sweep["columns"] = [c for c in sweep["columns"] if c["name"] in ("(1)", "(6)", "(8)")]
    cfg = tmp_path / "sweep.json"
    cfg.write_text(json.dumps(sweep))
    run_ok("sweep", "--config", cfg, "--survey", survey_csv, "--out-dir", tmp_path / "o")
    t4 = pd.read_csv(tmp_path / "o" / "table4.csv")
    assert list(t4.columns) == ["window", "statistic", "(1)", "(6)", "(8)"]
    assert (tmp_path / "o" / "event_study_8.csv").exists()


def test_sweep_needs_one_input(tmp_path):
    assert main(["sweep", "--config", str(CONFIGS / "table4_sweep.json"), "--out-dir", str(tmp_path)]) == 1


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("argv", [
    ["estimate", "--outcome-kind", "continuous"],
    ["estimate", "--outcome-kind", "continuous", "--method", "ifect", "--max-rank", "2", "--bootstrap-reps", "10"],
])
def test_estimate_byte_identical_across_threads(tmp_path, sim_panel, argv):
    run_ok(*argv, "--panel", sim_panel, "--out-dir", tmp_path / "a", "--threads", 1)
    run_ok(*argv, "--panel", sim_panel, "--out-dir", tmp_path / "b", "--threads", 3)
    run_ok(*argv, "--panel", sim_panel, "--out-dir", tmp_path / "c", "--threads", 1)
    a = read_bytes(tmp_path / "a")
    assert a == read_bytes(tmp_path / "b") == read_bytes(tmp_path / "c")


def test_simulate_and_benchmark_byte_identical(tmp_path):
    spec = tmp_path / "b.json"
    spec.write_text(json.dumps({"reps": 2, "specs": {"s": {"n_units": 150, "seed": 2}}}))
    for d, th in (("a", 1), ("b", 2)):
        run_ok("benchmark", "--spec", spec, "--out-dir", tmp_path / d, "--threads", th)
        run_ok("simulate", "--out-dir", tmp_path / d / "sim", "--seed", 9, "--threads", th)
    assert read_bytes(tmp_path / "a") == read_bytes(tmp_path / "b")
    assert read_bytes(tmp_path / "a" / "sim") == read_bytes(tmp_path / "b" / "sim")
