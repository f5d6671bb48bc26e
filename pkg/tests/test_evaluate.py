import numpy as np
import pandas as pd
import pytest

from balancegauge.errors import DegenerateResponseError, DomainError, RankDeficiencyError, SchemaError
from balancegauge.evaluate import (EvalTable, assemble_eval_table, completeness, evaluate_archive,
                                   find_archives, fit_bias_regression, merge_identical, rank_metrics,
                                   regression_design)
from balancegauge.simulate import ARCHIVE_COLUMNS


def synthetic_archive(reps=30, seed=0, noise=0.01):
    rng = np.random.default_rng(seed)
    rows = []
    for rep in range(reps):
        for regime in ("unweighted", "W0xW1", "W1"):
            b = rng.uniform(0, 1, 3)
            y = 0.02 + 0.3 * b[0] + 0.2 * b[2] + rng.normal(scale=noise)
            rows.append([rep, "simple", regime, "SMD", *b, y])
            rows.append([rep, "simple", regime, "CS", b[0], b[1], b[1], y])
    return pd.DataFrame(rows, columns=ARCHIVE_COLUMNS)


def test_regression_recovers_known_relationship():
    arc = synthetic_archive()
    r = fit_bias_regression(assemble_eval_table(arc, "SMD", "simple"))
    assert r.r_squared > 0.95
    assert r.intercept == pytest.approx(0.02, abs=0.02)
    assert r.n_rows == 90


def test_regression_design_uses_raw_squares():
    X, names = regression_design(np.array([[1.0, 2, 3], [4, 5, 6]]))
    assert names[-1] == "bal_A1X1^2"
    assert X[1].tolist() == [1, 4, 5, 6, 16, 25, 36]


def test_identical_balance_variables_are_merged():
    arc = synthetic_archive()
    r = fit_bias_regression(assemble_eval_table(arc, "CS"))
    assert r.merged == ("bal_A1X1",)
    b, names, merged = merge_identical(np.array([[1.0, 2, 2], [3, 4, 4]]))
    assert names == ["bal_A0X0", "bal_A1X0"] and b.shape == (2, 2)


def test_nearly_collinear_variables_raise_with_metric_name():
    rng = np.random.default_rng(1)
    b = rng.uniform(size=(40, 1))
    balance = np.hstack([b, 2 * b, rng.uniform(size=(40, 1))])
    with pytest.raises(RankDeficiencyError, match="KS"):
        fit_bias_regression(EvalTable("KS", rng.normal(size=40), balance))


def test_constant_balance_column_is_rank_deficient():
    # only one regime with a constant metric value leaves no variation to regress on
    rng = np.random.default_rng(2)
    balance = np.column_stack([np.zeros(20), rng.uniform(size=20), rng.uniform(size=20)])
    with pytest.raises(RankDeficiencyError):
        fit_bias_regression((rng.normal(size=20), balance))


def test_constant_bias_is_degenerate():
    rng = np.random.default_rng(3)
    with pytest.raises(DegenerateResponseError):
        fit_bias_regression(EvalTable("D", np.ones(20), rng.uniform(size=(20, 3))))


def test_too_few_rows():
    with pytest.raises(DomainError):
        fit_bias_regression((np.arange(5.0), np.ones((5, 3))))


def test_ranking_orders_by_r2_then_intercept():
    from balancegauge.evaluate import EvalResult

    res = [EvalResult("A", 0.9, 0.05, 10), EvalResult("B", 0.95, -0.2, 10),
           EvalResult("C", 0.9, -0.01, 10)]
    df = rank_metrics(res, alert=0.1)
    assert df["metric"].tolist() == ["B", "C", "A"]
    assert df["alert"].tolist() == [True, False, False]


def test_evaluate_archive_reports_problems():
    arc = synthetic_archive()
    arc.loc[0, "bias"] = np.nan
    res, problems = evaluate_archive(arc, "toy")
    assert {r.metric for r in res} == {"SMD", "CS"}
    assert any("dropped 1 row" in p for p in problems)
    assert any("merged" in p for p in problems)


def test_archive_discovery_and_completeness(tmp_path):
    arc = synthetic_archive(reps=4)
    arc.to_csv(tmp_path / "toy.csv", index=False)
    arc.to_csv(tmp_path / "toy_summary.csv", index=False)
    pd.DataFrame({"a": [1]}).to_csv(tmp_path / "other.csv", index=False)
    assert list(find_archives(tmp_path)) == ["toy"]
    missing = completeness(arc.drop(index=[0]))
    assert missing == ["rep=0 ps_spec=simple regime=unweighted metric=SMD"]
    with pytest.raises(DomainError):
        find_archives(tmp_path / "empty_missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(DomainError):
        find_archives(tmp_path / "empty")
    with pytest.raises(SchemaError):
        evaluate_archive(arc.drop(columns=["bias"]))
