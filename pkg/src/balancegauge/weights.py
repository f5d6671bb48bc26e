"""Inverse probability of treatment and censoring weights.

Weights are products over time-points of per-time factors
``numerator_t / denominator_t`` evaluated at each subject's observed value.
Denominators are logistic models of A_t on the full covariate history and
prior treatments (restricted to subjects still under follow-up); numerators
depend on the family:

* ``unstabilized_U``: 1
* ``stabilized_SW``: P(A_t | prior treatments)
* ``marginal_W`` / ``treatment_WA``: P(A_t | uncensored at t), intercept only

Censoring factors use P(C_t = 0 | uncensored at t-1) over
P(C_t = 0 | prior treatments, prior covariates, uncensored at t-1).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import DegenerateResponseError, DomainError, SchemaError
from .glm import SIMPLE, Design, DesignSpec, GlmFit, build_design, fit_weighted_logistic, predict_proba
from .panel import PanelDataset, encode_covariates

FAMILIES = ("unstabilized_U", "stabilized_SW", "marginal_W", "censoring_WC",
            "treatment_WA", "combined_WAC", "partial", "custom")
TREATMENT_FAMILIES = ("unstabilized_U", "stabilized_SW", "marginal_W", "treatment_WA")
_ALIASES = {"unstabilized": "unstabilized_U", "U": "unstabilized_U",
            "stabilized": "stabilized_SW", "SW": "stabilized_SW",
            "marginal": "marginal_W", "W": "marginal_W",
            "treatment": "treatment_WA", "WA": "treatment_WA"}


def normalize_family(family: str) -> str:
    family = _ALIASES.get(family, family)
    if family not in FAMILIES:
        raise DomainError(f"unknown weight family {family!r}")
    return family


@dataclass(frozen=True)
class Truncation:
    percentile: float
    cutoff: float


@dataclass(frozen=True, eq=False)
class WeightSet:
    """Per-subject weights; NaN marks subjects for whom the product is undefined."""

    family: str
    values: np.ndarray
    time_range: tuple
    truncation: Truncation | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        ok = ~np.isnan(v)
        if (v[ok] < 0).any() or not np.isfinite(v[ok]).all():
            raise DomainError("weights must be finite and nonnegative")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "time_range", tuple(self.time_range))

    @property
    def available(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def mean(self) -> float:
        return float(np.nanmean(self.values))

    def mean_se(self) -> float:
        v = self.values[self.available]
        return float(v.std(ddof=1) / np.sqrt(len(v)))

    def to_frame(self) -> pd.DataFrame:
        ids = self.ids if self.ids is not None else np.arange(len(self.values))
        cut = self.truncation.cutoff if self.truncation else np.nan
        return pd.DataFrame({"id": ids, "family": self.family, "value": self.values,
                             "truncated_at": cut})


def unit_weights(data: PanelDataset, through: int | None = None) -> WeightSet:
    """Weight 1 for subjects uncensored through ``through`` (default: last time)."""
    t = data.T if through is None else through
    v = np.where(data.uncensored(t), 1.0, np.nan)
    return WeightSet("custom", v, (), ids=data.ids)


# ---------------------------------------------------------------------------
# Model fitting


@dataclass
class TimeModel:
    """Denominator and numerator fits for one time-point."""

    time: int
    rows: np.ndarray
    denominator: GlmFit
    denominator_design: Design
    numerator: GlmFit | None
    numerator_design: Design | None
    response: np.ndarray = field(repr=False, default=None)

    def probabilities(self):
        """P(response = 1) under the denominator and numerator models, on ``rows``."""
        den = predict_proba(self.denominator, self.denominator_design)
        num = None if self.numerator is None else predict_proba(self.numerator, self.numerator_design)
        return den, num


@dataclass
class TreatmentModels:
    family: str
    spec: DesignSpec
    models: dict


@dataclass
class CensoringModels:
    spec: DesignSpec
    models: dict


def history_columns(data: PanelDataset, t: int, rows: np.ndarray, covariate_lags_to: int,
                    treatments_to: int):
    """Encoded X_0..X_{covariate_lags_to} and A_0..A_{treatments_to - 1}, on ``rows``."""
    cols, names = [], []
    for s in range(covariate_lags_to + 1):
        c, nm, _ = encode_covariates(data, s, rows)
        cols.append(c)
        names += [f"{n}_{s}" for n in nm]
    for s in range(treatments_to):
        cols.append(data.treatment[rows, s][:, None])
        names.append(f"A_{s}")
    return np.hstack(cols), names


def _prior_treatments(data, rows, t):
    if t == 0:
        return np.empty((len(rows), 0)), []
    return data.treatment[rows, :t], [f"A_{s}" for s in range(t)]


def fit_treatment_models(data: PanelDataset, spec: DesignSpec = SIMPLE,
                         family: str = "marginal_W") -> TreatmentModels:
    """Fit denominator and numerator treatment models at every time-point."""
    family = normalize_family(family)
    if family not in TREATMENT_FAMILIES:
        raise DomainError(f"{family!r} is not a treatment weight family")
    models = {}
    for t in range(data.T_plus_1):
        rows = np.flatnonzero(data.uncensored(t))
        a = data.treatment[rows, t]
        if len(rows) == 0 or a.min() == a.max():
            raise DegenerateResponseError(f"treatment is degenerate at t={t}")
        cols, names = history_columns(data, t, rows, t, t)
        den_design = build_design(cols, names, spec)
        den = fit_weighted_logistic(den_design, a)
        num = num_design = None
        if family == "stabilized_SW":
            pc, pn = _prior_treatments(data, rows, t)
            num_design = build_design(pc, pn, SIMPLE) if pn else _intercept(len(rows))
            num = fit_weighted_logistic(num_design, a)
        elif family in ("marginal_W", "treatment_WA"):
            num_design = _intercept(len(rows))
            num = fit_weighted_logistic(num_design, a)
        models[t] = TimeModel(t, rows, den, den_design, num, num_design, a)
    return TreatmentModels(family, spec, models)


def _intercept(m: int) -> Design:
    return Design(np.ones((m, 1)), ["(Intercept)"])


def fit_censoring_models(data: PanelDataset, spec: DesignSpec = SIMPLE) -> CensoringModels:
    """Models for remaining uncensored at each t >= 1 among those uncensored at t-1.

    Time-points without any censoring event get no model (factor 1).
    """
    models = {}
    for t in range(1, data.T_plus_1):
        rows = np.flatnonzero(data.uncensored(t - 1))
        stay = (data.censored[rows, t] == 0).astype(float)
        if len(rows) == 0 or stay.min() == 1.0:
            continue
        if stay.max() == 0.0:
            raise DegenerateResponseError(f"every subject is censored at t={t}")
        cols, names = history_columns(data, t, rows, t - 1, t)
        den_design = build_design(cols, names, spec)
        den = fit_weighted_logistic(den_design, stay)
        num_design = _intercept(len(rows))
        num = fit_weighted_logistic(num_design, stay)
        models[t] = TimeModel(t, rows, den, den_design, num, num_design, stay)
    if not models:
        raise DomainError("no censoring observed at any time-point; "
                          "censoring weights are not needed, use treatment weights alone")
    return CensoringModels(spec, models)


# ---------------------------------------------------------------------------
# Weight evaluation


def treatment_factors(data: PanelDataset, models: TreatmentModels, family: str | None = None,
                      force_unit_numerator: bool = False) -> np.ndarray:
    """(n, T+1) matrix of per-time factors; NaN where the subject is censored."""
    family = normalize_family(family or models.family)
    out = np.full((data.n, data.T_plus_1), np.nan)
    for t, m in models.models.items():
        den, num = m.probabilities()
        a = m.response
        den_obs = np.where(a == 1, den, 1 - den)
        if family == "unstabilized_U" or force_unit_numerator or num is None:
            num_obs = 1.0
        else:
            num_obs = np.where(a == 1, num, 1 - num)
        out[m.rows, t] = num_obs / den_obs
    return out


def censoring_factors(data: PanelDataset, models: CensoringModels) -> np.ndarray:
    """(n, T+1) factors for remaining uncensored; NaN once censored, 1 where unmodelled."""
    out = np.where(data.censored == 0, 1.0, np.nan)
    for t, m in models.models.items():
        den, num = m.probabilities()
        stay = m.response == 1
        f = np.full(len(m.rows), np.nan)
        f[stay] = num[stay] / den[stay]
        out[m.rows, t] = f
    return out


def _product(factors: np.ndarray, time_range) -> np.ndarray:
    return np.prod(factors[:, list(time_range)], axis=1)


def compute_weights(data: PanelDataset, models: TreatmentModels, family: str | None = None,
                    time_range=None) -> WeightSet:
    """Product of per-time treatment factors over ``time_range`` (default: all)."""
    family = normalize_family(family or models.family)
    time_range = tuple(range(data.T_plus_1)) if time_range is None else tuple(sorted(time_range))
    if not set(time_range) <= set(models.models):
        raise DomainError(f"models do not cover time_range {time_range}")
    if family == "marginal_W" and data.censored.any():
        family = "treatment_WA"
    f = treatment_factors(data, models, family)
    return WeightSet(family, _product(f, time_range), time_range, ids=data.ids)


def compute_censoring_weights(data: PanelDataset, models: CensoringModels,
                              time_range=None) -> WeightSet:
    time_range = tuple(range(data.T_plus_1)) if time_range is None else tuple(sorted(time_range))
    f = censoring_factors(data, models)
    return WeightSet("censoring_WC", _product(f, time_range), time_range, ids=data.ids)


def multiply(*sets: WeightSet, family: str = "custom") -> WeightSet:
    """Elementwise product of weight sets over the same subjects."""
    n = {len(s.values) for s in sets}
    if len(n) != 1:
        raise DomainError("weight sets cover different numbers of subjects")
    ids = [s.ids for s in sets if s.ids is not None]
    if any(not np.array_equal(ids[0], i) for i in ids[1:]):
        raise DomainError("weight sets are indexed by different subjects")
    v = np.prod([s.values for s in sets], axis=0)
    tr = tuple(sorted(set().union(*(s.time_range for s in sets))))
    return WeightSet(family, v, tr, ids=ids[0] if ids else None)


def combine_weights(wa: WeightSet, wc: WeightSet, uncensored_through_end=None) -> WeightSet:
    """Treatment x censoring weights (W^{A,C}).

    ``uncensored_through_end`` (boolean mask) limits the result to subjects
    followed to the last time-point; others become NaN.
    """
    if wa.family not in ("treatment_WA", "marginal_W"):
        raise DomainError(f"treatment weights must be treatment_WA or marginal_W, got {wa.family}")
    if wc.family != "censoring_WC":
        raise DomainError(f"censoring weights must be censoring_WC, got {wc.family}")
    out = multiply(wa, wc, family="combined_WAC")
    if uncensored_through_end is not None:
        v = np.where(uncensored_through_end, out.values, np.nan)
        out = replace(out, values=v)
    return out


def truncate_weights(w: WeightSet, percentile: float) -> WeightSet:
    """Cap weights at their empirical ``percentile`` quantile (linear interpolation).

    Re-truncating at the percentile already recorded reuses the recorded cutoff,
    so the operation is idempotent.
    """
    if not (0 < percentile <= 1):
        raise DomainError(f"percentile must lie in (0, 1], got {percentile}")
    ok = w.available
    if not ok.any():
        raise DomainError("cannot truncate an empty weight set")
    if w.truncation is not None and w.truncation.percentile == percentile:
        cutoff = w.truncation.cutoff
    else:
        cutoff = float(np.quantile(w.values[ok], percentile))
    v = np.where(ok, np.minimum(w.values, cutoff), np.nan)
    return replace(w, values=v, truncation=Truncation(percentile, cutoff))


def truncate_factor(factors: np.ndarray, t: int, percentile: float) -> np.ndarray:
    """Copy of ``factors`` with column ``t`` capped at its ``percentile`` quantile."""
    out = factors.copy()
    col = out[:, t]
    ok = ~np.isnan(col)
    cutoff = float(np.quantile(col[ok], percentile))
    out[ok, t] = np.minimum(col[ok], cutoff)
    return out


def read_weights(path, ids=None) -> WeightSet:
    """Read ``id,family,value,truncated_at`` CSV (extra columns ignored)."""
    df = pd.read_csv(path, float_precision="round_trip")
    for col in ("id", "value"):
        if col not in df.columns:
            raise SchemaError(f"{path}: weights file needs column {col!r}")
    family = str(df["family"].iloc[0]) if "family" in df.columns and len(df) else "custom"
    family = family if family in FAMILIES else "custom"
    values = df["value"].to_numpy(dtype=float)
    wid = df["id"].to_numpy()
    if ids is not None:
        order = pd.Series(np.arange(len(wid)), index=wid)
        missing = set(ids) - set(wid)
        if missing:
            raise SchemaError(f"{path}: no weight for {len(missing)} subject(s)")
        values = values[order.loc[ids].to_numpy()]
        wid = np.asarray(ids)
    trunc = None
    if "truncated_at" in df.columns and df["truncated_at"].notna().any():
        trunc = Truncation(np.nan, float(df["truncated_at"].dropna().iloc[0]))
    return WeightSet(family, values, (), trunc, wid)


def write_weights(w: WeightSet, path) -> None:
    w.to_frame().to_csv(path, index=False, float_format="%.17g", na_rep="")
