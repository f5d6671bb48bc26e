"""Longitudinal balance tables over the (t, k) schedule."""

from __future__ import annotations

import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import BalanceGaugeError, DomainError, PolicyWarning
from .metrics import (ALL_METRICS, UNIVARIATE, gwd, ks_distance, levy_distance,
                      mahalanobis_balance, mean_difference, overlap, post_weighting_cstat, smd)
from .panel import PanelDataset, covariate_block, encode_covariates
from .weights import WeightSet

GLOBAL_KEY = "GLOBAL"
SMD_THRESHOLD = 0.1
MHB_PER_COVARIATE = 0.01
STABILIZED_WARNING = ("stabilized weights with a treatment-history numerator only balance "
                      "covariates conditionally on past treatment; check balance with marginal "
                      "stabilized weights instead")


def balance_schedule(T: int, baseline: bool = True) -> list[tuple[int, int]]:
    """All (t, k) with 0 <= k <= t <= T.

    With ``baseline=False`` the t = 0 comparison is left out, which gives the
    count of longitudinal checks beyond the point-treatment one
    (sum_{t=1}^{T} (t + 1)).
    """
    start = 0 if baseline else 1
    return [(t, k) for t in range(start, T + 1) for k in range(t + 1)]


def _parse_metrics(metrics):
    if metrics is None:
        return list(ALL_METRICS)
    if isinstance(metrics, str):
        metrics = [m.strip() for m in metrics.split(",") if m.strip()]
    lookup = {m.lower(): m for m in ALL_METRICS}
    lookup.update({"lv": "LD", "levy": "LD", "ovl": "OVL", "c": "CS"})
    out = []
    for m in metrics:
        key = lookup.get(m.lower())
        if key is None:
            raise DomainError(f"unknown metric {m!r}; choose from {', '.join(ALL_METRICS)}")
        if key not in out:
            out.append(key)
    return out


@dataclass
class BalanceReport:
    """Metric values per (t, k, metric, covariate); GLOBAL for multivariate metrics."""

    cells: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    n_covariates: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    schedule: list = field(default_factory=list)
    weight_family: str = "custom"

    def value(self, t, k, metric, covariate=GLOBAL_KEY) -> float:
        return self.cells[(t, k, metric, covariate)]

    def aggregate(self, metric: str) -> dict:
        """(t, k) -> value; univariate metrics are averaged over covariates."""
        vals = defaultdict(list)
        for (t, k, m, _), v in self.cells.items():
            if m == metric:
                vals[(t, k)].append(v)
        return {tk: (float(np.mean(v)) if not np.isnan(v).any() else np.nan)
                for tk, v in vals.items()}

    def averages(self) -> dict:
        return {m: self.aggregate(m) for m in self.metrics}

    def flagged(self, metric: str = "MHB") -> list[tuple[int, int]]:
        return sorted({(t, k) for (t, k, m, c), v in self.cells.items()
                       if m == metric and self._flag(t, k, m, c, v)})

    def _flag(self, t, k, m, c, v):
        thr = self.thresholds.get((t, k, m, c))
        return thr is not None and not np.isnan(v) and v > thr

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for (t, k, m, c), v in self.cells.items():
            thr = self.thresholds.get((t, k, m, c), np.nan)
            rows.append({"t": t, "k": k, "metric": m, "covariate": c, "value": v,
                         "threshold": thr,
                         "flag": "" if np.isnan(thr) or np.isnan(v) else int(v > thr)})
        return pd.DataFrame(rows, columns=["t", "k", "metric", "covariate", "value",
                                           "threshold", "flag"])

    def to_json(self) -> dict:
        nested: dict = {}
        for (t, k, m, c), v in self.cells.items():
            entry = {"value": None if np.isnan(v) else v}
            thr = self.thresholds.get((t, k, m, c))
            if thr is not None:
                entry["threshold"] = thr
                entry["flag"] = bool(v > thr) if not np.isnan(v) else None
            nested.setdefault(str(t), {}).setdefault(str(k), {}).setdefault(m, {})[c] = entry
        return {"weight_family": self.weight_family, "metrics": self.metrics,
                "schedule": [list(tk) for tk in self.schedule], "cells": nested,
                "failures": {f"{t},{k},{m}": msg for (t, k, m), msg in self.failures.items()}}

    def write(self, stem) -> tuple[str, str]:
        csv_path, json_path = f"{stem}.csv", f"{stem}.json"
        self.to_frame().to_csv(csv_path, index=False, float_format="%.10g")
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)
        return csv_path, json_path


def history_block(data: PanelDataset, t: int, rows: np.ndarray) -> np.ndarray:
    """Encoded X_0..X_t (no treatments) for ``rows``."""
    return np.hstack([encode_covariates(data, s, rows)[0] for s in range(t + 1)])


def balance_table(data: PanelDataset, weights: WeightSet | np.ndarray | None = None,
                  metrics=None, schedule=None, *, gwd_mode: str = "mean",
                  cs_history: bool = True, cs_auc_weighted: bool = False) -> BalanceReport:
    """Compute the requested metrics at every (t, k) of the schedule.

    Rows are subjects uncensored at ``t`` that carry a (non-missing) weight.
    The post-weighting C-statistic for (t, k) refits A_t on the full
    covariate history X_0..X_t when ``cs_history`` is true (the same value
    is then reported for every lag k), otherwise on X_{t-k} alone. Its AUC
    is unweighted unless ``cs_auc_weighted`` is set.
    Failed cells are recorded as NaN with the reason in ``failures``.
    """
    metrics = _parse_metrics(metrics)
    if weights is None:
        w_all = np.ones(data.n)
        family = "unweighted"
    elif isinstance(weights, WeightSet):
        w_all = np.asarray(weights.values, dtype=float)
        family = weights.family
        if family == "stabilized_SW":
            warnings.warn(STABILIZED_WARNING, PolicyWarning, stacklevel=2)
    else:
        w_all = np.asarray(weights, dtype=float)
        family = "custom"
    if len(w_all) != data.n:
        raise DomainError(f"weights cover {len(w_all)} subjects, panel has {data.n}")
    if schedule is None:
        schedule = balance_schedule(data.T)
    available = ~np.isnan(w_all)

    report = BalanceReport(metrics=metrics, schedule=list(schedule), weight_family=family)
    cs_cache: dict = {}
    for t, k in schedule:
        block = covariate_block(data, t, k, mask=available)
        w = w_all[block.rows]
        g = block.group
        p = block.columns.shape[1]
        report.n_covariates[(t, k)] = p
        for m in metrics:
            if m in UNIVARIATE:
                for j, name in enumerate(block.names):
                    x = block.columns[:, j]
                    key = (t, k, m, name)
                    try:
                        report.cells[key] = _univariate(m, x, g, w, block.kinds[j])
                    except BalanceGaugeError as exc:
                        report.cells[key] = np.nan
                        report.failures[(t, k, m)] = str(exc)
                    if m == "SMD":
                        report.thresholds[key] = SMD_THRESHOLD
            else:
                key = (t, k, m, GLOBAL_KEY)
                try:
                    if m == "MHB":
                        val = mahalanobis_balance(block.columns, g, w)
                        report.thresholds[key] = MHB_PER_COVARIATE * p
                    elif m == "GWD":
                        val = gwd(block.columns, g, w, mode=gwd_mode)
                    elif cs_history:
                        if t not in cs_cache:
                            cs_cache[t] = post_weighting_cstat(
                                history_block(data, t, block.rows), g, w, cs_auc_weighted)
                        val = cs_cache[t]
                    else:
                        val = post_weighting_cstat(block.columns, g, w, cs_auc_weighted)
                except BalanceGaugeError as exc:
                    val = np.nan
                    report.failures[(t, k, m)] = str(exc)
                report.cells[key] = val
    return report


def _univariate(metric, x, g, w, kind):
    if metric == "D":
        return mean_difference(x, g, w)
    if metric == "SMD":
        return smd(x, g, w)
    if metric == "OVL":
        return overlap(x, g, w, kind=kind)
    if metric == "KS":
        return ks_distance(x, g, w)
    return levy_distance(x, g, w)


def mhb_first_summary(report: BalanceReport) -> pd.DataFrame:
    """MHB per (t, k) with its threshold, plus the SMD-flagged covariates where MHB is flagged."""
    rows = []
    for t, k in report.schedule:
        key = (t, k, "MHB", GLOBAL_KEY)
        if key not in report.cells:
            continue
        v, thr = report.cells[key], report.thresholds.get(key, np.nan)
        flagged = bool(v > thr) if not np.isnan(v) else False
        drill = ""
        if flagged:
            bad = [c for (tt, kk, m, c), s in report.cells.items()
                   if (tt, kk, m) == (t, k, "SMD") and s > SMD_THRESHOLD]
            drill = ";".join(bad)
        rows.append({"t": t, "k": k, "mhb": v, "threshold": thr, "flag": int(flagged),
                     "smd_imbalanced": drill})
    return pd.DataFrame(rows, columns=["t", "k", "mhb", "threshold", "flag", "smd_imbalanced"])
