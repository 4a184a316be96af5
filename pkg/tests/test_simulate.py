import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalpanel.core import build_cohort_index, validate_panel
from causalpanel.did import DidConfig, estimate_all
from causalpanel.errors import InfeasibleSpec
from causalpanel.eventstudy import aggregate_event_study
from causalpanel.simulate import (
    DgpSpec,
    benchmark,
    did_estimator,
    generate,
    replicate_seed,
    synthetic_survey,
)

specs = st.builds(
    DgpSpec,
    n_units=st.integers(20, 150),
    factor_rank=st.sampled_from([0, 1, 2]),
    loading_adoption_correlation=st.floats(-1, 1),
    factor_strength=st.floats(0, 0.3),
    noise_sd=st.floats(0, 0.2),
    outcome_kind=st.sampled_from(["linear", "binary"]),
    attrition=st.sampled_from(["none", "waves"]),
    x_selection=st.floats(-1, 1),
    seed=st.integers(0, 10_000),
)


@settings(max_examples=30)
@given(specs)
def test_generated_panels_validate(spec):
    panel, truth = generate(spec)
    again = validate_panel(panel.to_frame(with_cohort=True), binary_outcome=panel.binary_outcome)
    assert again.first_treated == panel.first_treated
    assert panel.binary_outcome == (spec.outcome_kind.value == "binary")


@settings(max_examples=20)
@given(specs)
def test_treated_counts_match_recount(spec):
    panel, truth = generate(spec)
    f = panel.to_frame(with_cohort=True)
    treated = f[f["treated"] == 1]
    recount = (treated["year"] - treated["first_treated"]).astype(int).value_counts().to_dict()
    assert truth.n_e == recount


def test_zero_effect_truth():
    panel, truth = generate(DgpSpec(true_effect=0.0, outcome_kind="linear", seed=1))
    assert all(v == 0.0 for v in truth.atet_e.values())
    assert all(v == 0.0 for v in truth.atet_gt.values())


def test_linear_truth_is_effect_path():
    spec = DgpSpec(outcome_kind="linear", effect_path={0: -0.01, 1: -0.03}, true_effect=-0.05, seed=2)
    _, truth = generate(spec)
    assert [truth.atet_e[e] for e in (0, 1, 4)] == pytest.approx([-0.01, -0.03, -0.05], abs=1e-15)


def test_noiseless_linear_did_equals_truth():
    spec = DgpSpec(n_units=300, outcome_kind="linear", noise_sd=0.0, effect_path={0: -0.02, 2: -0.07}, seed=3)
    panel, truth = generate(spec)
    idx = build_cohort_index(panel)
    res = estimate_all(panel, idx, DidConfig())
    for eff in res:
        expected = truth.atet_gt[(eff.g, eff.t)] if eff.t >= eff.g else 0.0
        assert eff.estimate == pytest.approx(expected, abs=1e-10)
    es = aggregate_event_study(res, idx)
    for e in range(0, 6):
        assert es.estimate(e) == pytest.approx(truth.cohort_weighted(e), abs=1e-10)


def test_truth_is_deterministic():
    a = generate(DgpSpec(seed=4))
    b = generate(DgpSpec(seed=4))
    assert a[1] == b[1]
    pd.testing.assert_frame_equal(a[0].frame, b[0].frame)


def test_binary_probabilities_are_clamped():
    panel, truth = generate(DgpSpec(base_rate=0.0, unit_effect_sd=1.0, seed=5))
    assert set(np.unique(panel.frame["outcome"])) <= {0.0, 1.0}
    assert all(-1 < v < 1 for v in truth.atet_e.values())


@pytest.mark.parametrize("bad", [
    dict(cohort_shares={2005: 0.5}, never_treated_share=0.2),
    dict(noise_sd=-1.0),
    dict(factor_rank=3),
    dict(cohort_shares={1990: 0.8}),
    dict(loading_adoption_correlation=2.0),
    dict(covariate_effects={"tax": 1.0}),
])
def test_infeasible_specs(bad):
    with pytest.raises(InfeasibleSpec):
        generate(DgpSpec(**bad))


def test_spec_dict_round_trip():
    spec = DgpSpec(effect_path={0: -0.1}, covariate_effects={"sales_ban": 0.1}, outcome_kind="linear")
    assert DgpSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(InfeasibleSpec):
        DgpSpec.from_dict({"n_unit": 3})


def test_benchmark_is_deterministic():
    spec = DgpSpec(n_units=200, seed=6)
    est = {"did": did_estimator()}
    a = benchmark({"s": spec}, est, reps=2)
    b = benchmark({"s": spec}, est, reps=2, threads=2)
    pd.testing.assert_frame_equal(a.table, b.table)
    pd.testing.assert_frame_equal(a.replicates, b.replicates)
    assert {"mean_bias", "mc_se", "rmse", "coverage", "rejection_rate", "mean_rank"} <= set(a.table.columns)
    assert set(a.timings.columns) == {"spec", "estimator", "rep", "seconds"}


def test_replicate_seeds_distinct():
    seeds = {replicate_seed(0, r) for r in range(1000)}
    assert len(seeds) == 1000


def test_benchmark_needs_inputs():
    with pytest.raises(ValueError):
        benchmark({}, {"did": did_estimator()}, reps=1)


def test_synthetic_survey_layout():
    s = synthetic_survey(500, seed=1)
    assert len(s) == 500
    assert set(s["status"]) <= {"never", "current", "former", "unknown"}
    assert set(s["gender"]) <= {0, 1}
    former = s[s["status"] == "former"]
    assert (former["cess_age"].notna() ^ former["cess_lo"].notna()).all()
    cur = s[s["status"] == "current"]
    assert (cur["init_age"] <= cur["age"]).all()
