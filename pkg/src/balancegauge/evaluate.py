"""Bias-on-imbalance regressions: how well each metric's balance variables predict bias."""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DegenerateResponseError, DomainError, RankDeficiencyError, SchemaError
from .glm import fit_ols
from .simulate import ARCHIVE_COLUMNS

BALANCE_VARIABLES = ("bal_A0X0", "bal_A1X0", "bal_A1X1")
REGRESSORS = ("(Intercept)",) + BALANCE_VARIABLES + tuple(f"{b}^2" for b in BALANCE_VARIABLES)
RESULT_COLUMNS = ["scenario", "ps_spec", "metric", "r2", "intercept"]
MIN_ROWS = len(REGRESSORS) + 1


@dataclass(frozen=True)
class EvalTable:
    """Rows (bias, b1, b2, b3) for one metric, with the count of dropped rows."""

    metric: str
    bias: np.ndarray
    balance: np.ndarray
    dropped: int = 0

    @property
    def n_rows(self) -> int:
        return len(self.bias)


@dataclass(frozen=True)
class EvalResult:
    metric: str
    r_squared: float
    intercept: float
    n_rows: int
    ps_spec: str = ""
    scenario: str = ""
    coefficients: tuple = ()
    merged: tuple = ()


def _check_archive(archive: pd.DataFrame):
    missing = [c for c in ARCHIVE_COLUMNS if c not in archive.columns]
    if missing:
        raise SchemaError(f"archive lacks column(s): {missing}")


def assemble_eval_table(archive: pd.DataFrame, metric: str, ps_spec: str | None = None) -> EvalTable:
    """One row per (replicate, regime) for ``metric``; rows with missing cells are dropped."""
    _check_archive(archive)
    sel = archive["metric"] == metric
    if ps_spec is not None:
        sel &= archive["ps_spec"] == ps_spec
    sub = archive.loc[sel]
    if sub.empty:
        raise DomainError(f"no archive rows for metric {metric!r}"
                          + (f" and PS spec {ps_spec!r}" if ps_spec else ""))
    cols = ["bias", *BALANCE_VARIABLES]
    ok = sub[cols].notna().all(axis=1) & np.isfinite(sub[cols].to_numpy(dtype=float)).all(axis=1)
    sub = sub.loc[ok]
    return EvalTable(metric, sub["bias"].to_numpy(dtype=float),
                     sub[list(BALANCE_VARIABLES)].to_numpy(dtype=float), int((~ok).sum()))


def regression_design(balance: np.ndarray, names=BALANCE_VARIABLES):
    """Intercept, the balance variables and their raw (uncentred) squares, with names."""
    b = np.asarray(balance, dtype=float)
    names = list(names)
    X = np.column_stack([np.ones(len(b)), b, b * b])
    return X, ["(Intercept)"] + names + [f"{n}^2" for n in names]


def merge_identical(balance: np.ndarray, names=BALANCE_VARIABLES):
    """Drop balance variables that repeat an earlier one exactly.

    A metric computed on the whole covariate history reports the same value
    at every lag, so two of its balance variables coincide by construction;
    only the first copy is kept. Returns (balance, kept names, merged names).
    """
    keep, merged = [], []
    for j in range(balance.shape[1]):
        if any(np.array_equal(balance[:, j], balance[:, i]) for i in keep):
            merged.append(names[j])
        else:
            keep.append(j)
    return balance[:, keep], [names[j] for j in keep], tuple(merged)


def fit_bias_regression(table: EvalTable | tuple) -> EvalResult:
    """OLS of bias on b1..b3 and b1^2..b3^2.

    Exactly repeated balance variables are merged first (see
    :func:`merge_identical`). Raises :class:`RankDeficiencyError` (with the
    metric name) when the remaining variables are collinear or nearly constant.
    """
    if isinstance(table, tuple):
        bias, balance = table
        table = EvalTable("", np.asarray(bias, dtype=float), np.asarray(balance, dtype=float))
    if table.n_rows < MIN_ROWS:
        raise DomainError(f"{table.metric or 'metric'}: need at least {MIN_ROWS} rows, "
                          f"got {table.n_rows}")
    balance, names, merged = merge_identical(table.balance)
    X, xnames = regression_design(balance, names)
    try:
        fit = fit_ols(X, table.bias, names=xnames)
    except RankDeficiencyError as exc:
        raise RankDeficiencyError(f"{table.metric}: {exc}", exc.columns) from None
    except DegenerateResponseError as exc:
        raise DegenerateResponseError(f"{table.metric}: {exc}") from None
    return EvalResult(table.metric, fit.r_squared, fit.intercept, table.n_rows,
                      coefficients=tuple(float(c) for c in fit.coefficients), merged=merged)


def rank_metrics(results: list[EvalResult], alert: float | None = None) -> pd.DataFrame:
    """Order by R^2 (descending), ties by |intercept| (ascending).

    With ``alert`` set, metrics whose |intercept| exceeds it are flagged.
    """
    if not results:
        raise DomainError("nothing to rank")
    ordered = sorted(results, key=lambda r: (-r.r_squared, abs(r.intercept), r.metric))
    rows = [{"rank": i + 1, "metric": r.metric, "r2": r.r_squared, "intercept": r.intercept,
             "alert": bool(alert is not None and abs(r.intercept) > alert)}
            for i, r in enumerate(ordered)]
    return pd.DataFrame(rows, columns=["rank", "metric", "r2", "intercept", "alert"])


def evaluate_archive(archive: pd.DataFrame, scenario: str = "",
                     metrics=None) -> tuple[list[EvalResult], list[str]]:
    """Fit the regression for every (PS spec, metric) in the archive.

    Returns the results and a list of problems (dropped rows, failed fits).
    """
    _check_archive(archive)
    problems = []
    results = []
    metrics = list(dict.fromkeys(archive["metric"])) if metrics is None else list(metrics)
    for ps in dict.fromkeys(archive["ps_spec"]):
        for m in metrics:
            try:
                table = assemble_eval_table(archive, m, ps)
                if table.dropped:
                    problems.append(f"{scenario} {ps} {m}: dropped {table.dropped} row(s) "
                                    "with missing cells")
                r = fit_bias_regression(table)
            except (DomainError, RankDeficiencyError, DegenerateResponseError) as exc:
                problems.append(f"{scenario} {ps} {m}: {exc}")
                continue
            if r.merged:
                problems.append(f"{scenario} {ps} {m}: identical balance variables merged: "
                                f"{', '.join(r.merged)}")
            results.append(EvalResult(m, r.r_squared, r.intercept, r.n_rows, ps, scenario,
                                      r.coefficients, r.merged))
    return results, problems


def results_frame(results: list[EvalResult]) -> pd.DataFrame:
    return pd.DataFrame([{"scenario": r.scenario, "ps_spec": r.ps_spec, "metric": r.metric,
                          "r2": r.r_squared, "intercept": r.intercept} for r in results],
                        columns=RESULT_COLUMNS)


def find_archives(directory) -> dict:
    """Scenario name -> archive path for every archive CSV in ``directory``."""
    if not os.path.isdir(directory):
        raise DomainError(f"{directory} is not a directory")
    found = {}
    for path in sorted(glob.glob(os.path.join(directory, "*.csv"))):
        stem = os.path.splitext(os.path.basename(path))[0]
        if stem.endswith(("_estimates", "_failures", "_summary")):
            continue
        head = pd.read_csv(path, nrows=0)
        if list(head.columns) == ARCHIVE_COLUMNS:
            found[stem] = path
    if not found:
        raise DomainError(f"no simulation archives found in {directory}")
    return found


def completeness(archive: pd.DataFrame) -> list[str]:
    """Describe (rep, ps_spec, regime, metric) cells absent from an archive."""
    _check_archive(archive)
    reps = sorted(archive["rep"].unique())
    full = pd.MultiIndex.from_product(
        [reps, archive["ps_spec"].unique(), archive["regime"].unique(), archive["metric"].unique()],
        names=["rep", "ps_spec", "regime", "metric"])
    have = pd.MultiIndex.from_frame(archive[["rep", "ps_spec", "regime", "metric"]])
    return [f"rep={r} ps_spec={p} regime={g} metric={m}" for r, p, g, m in full.difference(have)]
