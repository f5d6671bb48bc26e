import json
from pathlib import Path

import numpy as np
import pytest

from balancegauge.errors import DomainError, SchemaError
from balancegauge.scenarios import SCENARIO_IDS, ScenarioConfig, builtin_scenario
from balancegauge.simulate import (ARCHIVE_COLUMNS, REGIMES, MsmEstimate, MsmTruth, aggregate_bias,
                                   bias, draw_noise, estimate_msm, generate_scenario, make_rng,
                                   regime_factors, regime_weights, run_replicate, run_replicates,
                                   structural, truth_oracle)

GOLDEN = Path(__file__).parent / "golden" / "truth.json"


def test_forcing_observed_treatment_reproduces_observed_data():
    cfg = builtin_scenario("censored_base")
    noise = draw_noise(3000, make_rng(3))
    obs = structural(cfg, noise)
    forced = structural(cfg, noise, a0=obs["A0"], a1=obs["A1"])
    for key in ("A0", "A1", "C1", "Y"):
        assert np.array_equal(obs[key], forced[key])
    for t in ("X0", "X1"):
        for v in obs[t]:
            assert np.array_equal(obs[t][v], forced[t][v])


def test_forcing_a1_leaves_baseline_untouched():
    cfg = builtin_scenario("1")
    noise = draw_noise(500, make_rng(4))
    w0 = structural(cfg, noise, a0=0, a1=0)
    w1 = structural(cfg, noise, a0=0, a1=1)
    assert np.array_equal(w0["X1"]["L"], w1["X1"]["L"])
    assert (w1["Y"] >= w0["Y"]).sum() < len(w0["Y"])  # A1 is protective in the base case


def test_generation_is_reproducible_and_rep_streams_differ():
    cfg = builtin_scenario("1")
    a = generate_scenario(cfg, 9, n=300, rep=2)
    b = generate_scenario(cfg, 9, n=300, rep=2)
    c = generate_scenario(cfg, 9, n=300, rep=3)
    assert a.equals(b)
    assert not a.equals(c)


def test_base_case_marginals():
    d = generate_scenario(builtin_scenario("1"), 1, n=20000)
    assert d.treatment[:, 0].mean() == pytest.approx(0.49, abs=0.03)
    assert np.nanmean(d.outcome) == pytest.approx(0.25, abs=0.03)
    q = d.covariates[:, 0, d.covariate_names.index("Q")]
    assert set(np.unique(q)) == {1.0, 2.0, 3.0, 4.0, 5.0}
    assert np.mean(q == 1) == pytest.approx(0.5, abs=0.02)
    p = d.covariates[:, 0, d.covariate_names.index("P")]
    assert p.mean() == pytest.approx(0.2, abs=0.02)
    n0 = d.covariates[:, 0, d.covariate_names.index("N")]
    assert n0.std() == pytest.approx(10, rel=0.05)


def test_censored_base_censors_about_a_fifth():
    d = generate_scenario(builtin_scenario("censored_base"), 1, n=20000)
    assert d.censor_fraction(1) == pytest.approx(0.20, abs=0.02)
    assert d.censor_fraction(0) == 0
    gone = d.censored[:, 1] == 1
    assert np.isnan(d.outcome[gone]).all() and np.isnan(d.treatment[gone, 1]).all()


def test_scenario_registry():
    assert set(SCENARIO_IDS) == {str(i) for i in range(1, 11)} | {"censored_base"}
    assert builtin_scenario("base") is builtin_scenario("1")
    assert builtin_scenario("censored-base").censored
    assert builtin_scenario("3").n == 1000
    s5 = builtin_scenario("5")
    assert s5.beta_a0 == 0 and s5.beta_a1 == 0 and s5.gamma == (0, 0, 0, 0, 0)
    assert all(v == 0 for v in builtin_scenario("4").beta_y_0.values())
    with pytest.raises(DomainError):
        builtin_scenario("11")


def test_config_json_round_trip_and_validation(tmp_path):
    cfg = builtin_scenario("8")
    cfg.to_json(tmp_path / "c.json")
    assert ScenarioConfig.from_json(tmp_path / "c.json") == cfg
    with pytest.raises(SchemaError):
        ScenarioConfig.from_dict({"nope": 1})
    with pytest.raises(SchemaError):
        ScenarioConfig(phi_0={"W": 1.0})
    with pytest.raises(SchemaError):
        ScenarioConfig(q0_prevalence=(0.5, 0.4))
    with pytest.raises(SchemaError):
        ScenarioConfig.from_json(tmp_path / "missing.json")


@pytest.mark.parametrize("scenario", ["1", "5"])
def test_truth_matches_golden_values(scenario):
    golden = json.loads(GOLDEN.read_text())
    g = golden[f"scenario{scenario}"]
    t11 = truth_oracle(builtin_scenario(scenario), golden["N"], 11)
    assert np.allclose(t11.coefficients, g["11"]["coefficients"], atol=1e-8)
    t12 = truth_oracle(builtin_scenario(scenario), golden["N"], 12)
    assert np.allclose(t12.coefficients, g["12"]["coefficients"], atol=1e-8)
    # independent oracle runs agree within 3 Monte Carlo SE of their difference
    se_diff = np.sqrt(np.asarray(t11.standard_errors) ** 2 + np.asarray(t12.standard_errors) ** 2)
    assert np.all(np.abs(np.subtract(t11.coefficients, t12.coefficients)) <= 3 * se_diff)


def test_null_effect_scenario_has_unit_odds_ratios():
    t = truth_oracle(builtin_scenario("5"), 5000, 1)
    assert t.odds_ratios[0] == pytest.approx(1.0, abs=1e-12)
    assert t.odds_ratios[1] == pytest.approx(1.0, abs=1e-12)


def test_truth_oracle_rejects_tiny_n():
    with pytest.raises(DomainError):
        truth_oracle(builtin_scenario("1"), 10)


def test_bias_aggregations():
    truth = MsmTruth((0.0, np.log(0.5), np.log(0.5)), (0, 0, 0), 1)
    est = MsmEstimate((0.0, np.log(0.6), np.log(0.3)), 10)
    assert bias(est, truth) == pytest.approx(-0.05)
    assert bias(est, truth, "mean_abs") == pytest.approx(0.15)
    assert bias(est, truth, "abs_mean") == pytest.approx(0.05)
    with pytest.raises(DomainError):
        aggregate_bias((0.1,), "median")


def test_weighted_msm_is_close_to_truth_on_large_sample():
    cfg = builtin_scenario("1")
    d = generate_scenario(cfg, 2, n=20000)
    truth = truth_oracle(cfg, 50000, 2)
    regimes = regime_weights(d, regime_factors(d))
    weighted = bias(estimate_msm(d, regimes["W0xW1"]), truth)
    crude = bias(estimate_msm(d, regimes["unweighted"]), truth)
    assert abs(weighted) < 0.05
    assert crude > 0.2


def test_regime_weights_structure(censored_panel):
    f = regime_factors(censored_panel)
    reg = regime_weights(censored_panel, f)
    assert list(reg) == list(REGIMES)
    followed = censored_panel.uncensored(1)
    for name, w in reg.items():
        assert np.isnan(w.values[~followed]).all(), name
        assert (w.values[followed] > 0).all(), name
    assert reg["W0xW1"].family == "combined_WAC"
    assert np.nanmax(reg["W0tr90xW1"].values) <= np.nanmax(reg["W0xW1"].values)


def test_run_replicate_records():
    cfg = builtin_scenario("1").with_(n=800)
    truth = truth_oracle(cfg, 2000, 0)
    res = run_replicate(cfg, 0, 0, truth, metrics=("SMD", "MHB"))
    assert len(res.records) == len(REGIMES) * 2
    assert len(res.estimates) == len(REGIMES)
    assert not res.failures
    assert set(res.records[0]) == set(ARCHIVE_COLUMNS)


def test_run_replicates_jobs_invariant_and_validated():
    cfg = builtin_scenario("1").with_(n=600)
    a = run_replicates(cfg, 3, 7, metrics=("SMD", "KS"), jobs=1, oracle_n=2000)
    b = run_replicates(cfg, 3, 7, metrics=("SMD", "KS"), jobs=2, oracle_n=2000)
    assert a.records.equals(b.records)
    assert a.estimates.equals(b.estimates)
    with pytest.raises(DomainError):
        run_replicates(cfg, 0, 7)
    with pytest.raises(DomainError):
        run_replicates(cfg, 1, 7, ps_specs=("cubic",))
