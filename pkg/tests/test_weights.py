import numpy as np
import pytest
from scipy.special import expit

from balancegauge.errors import DomainError, SchemaError
from balancegauge.glm import SIMPLE
from balancegauge.weights import (WeightSet, combine_weights, compute_censoring_weights,
                                  compute_weights, fit_censoring_models, fit_treatment_models,
                                  multiply, normalize_family, read_weights, treatment_factors,
                                  truncate_factor, truncate_weights, unit_weights, write_weights)

from conftest import make_panel


def test_family_aliases():
    assert normalize_family("marginal") == "marginal_W"
    assert normalize_family("SW") == "stabilized_SW"
    with pytest.raises(DomainError):
        normalize_family("overlap")


def test_marginal_factor_is_marginal_over_conditional_probability(base_panel):
    models = fit_treatment_models(base_panel, SIMPLE, "marginal")
    f = treatment_factors(base_panel, models)
    m0 = models.models[0]
    den, num = m0.probabilities()
    a = m0.response
    assert np.allclose(num, a.mean())
    expected = np.where(a == 1, a.mean() / den, (1 - a.mean()) / (1 - den))
    assert np.allclose(f[m0.rows, 0], expected)
    w = compute_weights(base_panel, models)
    assert np.allclose(w.values, f[:, 0] * f[:, 1])
    # marginal weights have mean close to one in large samples
    assert w.mean() == pytest.approx(1.0, abs=0.1)


def test_unstabilized_factor_is_inverse_probability(base_panel):
    models = fit_treatment_models(base_panel, SIMPLE, "unstabilized")
    w = compute_weights(base_panel, models)
    den, _ = models.models[0].probabilities()
    a = models.models[0].response
    f0 = np.where(a == 1, 1 / den, 1 / (1 - den))
    assert w.family == "unstabilized_U"
    assert np.all(w.values >= f0 - 1e-12)


def test_stabilized_numerator_conditions_on_past_treatment(base_panel):
    models = fit_treatment_models(base_panel, SIMPLE, "stabilized")
    assert models.models[1].numerator_design.names == ["(Intercept)", "A_0"]
    assert models.models[0].numerator_design.names == ["(Intercept)"]


def test_weights_recover_known_propensity():
    # one binary confounder with known P(A=1|x); weighted groups are balanced on x
    data = make_panel(n=4000, T=0, seed=1)
    x = data.covariates[:, 0, 1]
    models = fit_treatment_models(data, SIMPLE, "marginal")
    w = compute_weights(data, models)
    a = data.treatment[:, 0]
    for grp in (0, 1):
        sel = a == grp
        assert np.average(x[sel], weights=w.values[sel]) == pytest.approx(x.mean(), abs=0.03)


def test_censoring_weights_and_combination(censored_panel):
    data = censored_panel
    cm = fit_censoring_models(data)
    wc = compute_censoring_weights(data, cm)
    assert np.isnan(wc.values[data.censored[:, 1] == 1]).all()
    assert (wc.values[data.censored[:, 1] == 0] > 0).all()
    wa = compute_weights(data, fit_treatment_models(data, SIMPLE, "marginal"))
    assert wa.family == "treatment_WA"
    wac = combine_weights(wa, wc, uncensored_through_end=data.uncensored(data.T))
    assert wac.family == "combined_WAC"
    ok = wac.available
    assert np.allclose(wac.values[ok], wa.values[ok] * wc.values[ok])
    with pytest.raises(DomainError):
        combine_weights(wc, wa)


def test_censoring_models_require_censoring(base_panel):
    with pytest.raises(DomainError, match="no censoring"):
        fit_censoring_models(base_panel)


def test_truncation_caps_at_type7_quantile_and_is_idempotent():
    v = np.r_[np.arange(1.0, 11.0), np.nan]
    w = WeightSet("custom", v, ())
    t1 = truncate_weights(w, 0.9)
    assert t1.truncation.cutoff == pytest.approx(np.quantile(np.arange(1.0, 11.0), 0.9))
    assert t1.truncation.cutoff == pytest.approx(9.1)
    assert np.nanmax(t1.values) == pytest.approx(9.1)
    assert np.isnan(t1.values[-1])
    t2 = truncate_weights(t1, 0.9)
    assert np.array_equal(t1.values, t2.values, equal_nan=True)
    with pytest.raises(DomainError):
        truncate_weights(w, 1.5)


def test_truncate_factor_only_touches_one_column():
    f = np.column_stack([np.arange(10.0), np.arange(10.0)])
    out = truncate_factor(f, 0, 0.5)
    assert out[:, 0].max() == pytest.approx(4.5)
    assert np.array_equal(out[:, 1], f[:, 1])


def test_weight_set_rejects_negative_values():
    with pytest.raises(DomainError):
        WeightSet("custom", np.array([1.0, -1.0]), ())


def test_multiply_checks_alignment():
    a = WeightSet("custom", np.ones(3), (0,), ids=np.array([1, 2, 3]))
    b = WeightSet("custom", np.full(3, 2.0), (1,), ids=np.array([1, 2, 3]))
    assert multiply(a, b).values.tolist() == [2.0, 2.0, 2.0]
    assert multiply(a, b).time_range == (0, 1)
    with pytest.raises(DomainError):
        multiply(a, WeightSet("custom", np.ones(2), ()))


def test_unit_weights_mark_censored_subjects():
    data = make_panel(censor_last=4)
    u = unit_weights(data)
    assert np.isnan(u.values[:4]).all() and (u.values[4:] == 1).all()


def test_weights_csv_round_trip(tmp_path, base_panel):
    w = truncate_weights(compute_weights(base_panel, fit_treatment_models(base_panel)), 0.99)
    write_weights(w, tmp_path / "w.csv")
    back = read_weights(tmp_path / "w.csv", ids=base_panel.ids[::-1])
    assert np.array_equal(back.values, w.values[::-1])
    assert back.family == "marginal_W"
    assert back.truncation.cutoff == w.truncation.cutoff
    with pytest.raises(SchemaError):
        read_weights(tmp_path / "w.csv", ids=np.array([99999]))


def test_simple_logit_factor_matches_manual_fit():
    data = make_panel(n=500, T=1, seed=3)
    models = fit_treatment_models(data, SIMPLE, "unstabilized")
    m = models.models[1]
    assert m.denominator_design.names == ["(Intercept)", "x_0", "b_0", "q_0", "x_1", "b_1", "q_1", "A_0"]
    den, _ = m.probabilities()
    assert np.allclose(den, expit(m.denominator_design.X @ m.denominator.coefficients))
