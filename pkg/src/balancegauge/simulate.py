"""Two time-point simulation: data generation, counterfactual truth and replicate campaigns.

Every random quantity is drawn up front as an exogenous noise array and the
observed variables are computed from the noise by the structural equations.
Forcing the treatments while reusing the same noise gives the counterfactual
world, which is what :func:`truth_oracle` relies on.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit
from threadpoolctl import threadpool_limits

from .balance import balance_table
from .errors import BalanceGaugeError, DomainError
from .glm import COMPLEX, SIMPLE, fit_weighted_logistic
from .metrics import ALL_METRICS
from .panel import CovariateSpec, PanelDataset
from .scenarios import ScenarioConfig
from .weights import (WeightSet, censoring_factors, fit_censoring_models, fit_treatment_models,
                      treatment_factors, truncate_factor)

log = logging.getLogger(__name__)

COVARIATES = ("L", "M", "N", "O", "P", "Q")
COVARIATE_SPECS = (
    CovariateSpec("L", "continuous"),
    CovariateSpec("M", "continuous"),
    CovariateSpec("N", "continuous"),
    CovariateSpec("O", "binary"),
    CovariateSpec("P", "binary"),
    CovariateSpec("Q", "ordinal", levels=(1, 2, 3, 4, 5)),
)
REGIMES = ("unweighted", "W0xW1", "W1", "W0", "W0tr90xW1", "W0xW1tr90")
PS_SPECS = {"simple": SIMPLE, "complex": COMPLEX}
BALANCE_CELLS = {"bal_A0X0": (0, 0), "bal_A1X0": (1, 1), "bal_A1X1": (1, 0)}
ARCHIVE_COLUMNS = ["rep", "ps_spec", "regime", "metric", "bal_A0X0", "bal_A1X0", "bal_A1X1", "bias"]
ESTIMATE_COLUMNS = ["rep", "ps_spec", "regime", "n_used", "logor_a0", "logor_a1",
                    "bias_a0", "bias_a1", "bias"]
BIAS_AGGREGATIONS = ("mean_signed", "mean_abs", "abs_mean")
DEFAULT_AGGREGATION = "mean_signed"
TRUNCATION_PERCENTILE = 0.90
ORACLE_N = 100_000

# Stage tags for the seed sequence (master seed, replicate, stage).
_STAGE_DATA = 0
_STAGE_ORACLE = 1


def make_rng(seed, rep: int = 0, stage: int = _STAGE_DATA) -> np.random.Generator:
    """Independent stream keyed by (seed, rep, stage)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng([int(seed), int(rep), int(stage)])


# ---------------------------------------------------------------------------
# Structural equations


def draw_noise(n: int, rng: np.random.Generator) -> dict:
    """All exogenous noise for ``n`` subjects, in a fixed draw order."""
    z = rng.standard_normal((6, n))
    u = rng.random((10, n))
    return {
        "L0": z[0], "M0": z[1], "N0": z[2], "L1": z[3], "M1": z[4], "N1": z[5],
        "O0": u[0], "P0": u[1], "Q0": u[2], "A0": u[3], "C1": u[4],
        "O1": u[5], "P1": u[6], "Q1": u[7], "A1": u[8], "Y": u[9],
    }


def _ordinal(u, prevalence):
    # inverse CDF onto categories 1..K
    cdf = np.cumsum(prevalence)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, u, side="right").astype(float) + 1.0


def _derived(x: dict) -> dict:
    x = dict(x)
    x["T"] = np.sin(x["L"])
    x["R"] = x["M"] ** 2
    x["V"] = x["N"] * x["O"]
    x["Z"] = x["O"] * x["P"]
    return x


def _linear(coefs: dict, x: dict):
    return sum(c * x[k] for k, c in coefs.items() if c != 0.0)


def structural(config: ScenarioConfig, noise: dict, a0=None, a1=None,
               uncensored: bool = False) -> dict:
    """Evaluate the generating equations on ``noise``.

    ``a0``/``a1`` force the treatments (scalar or array); ``uncensored``
    forces C_1 = 0. Returns a dict with X0, X1 (dicts of covariates incl.
    derived terms), A0, C1, A1 and Y. Values after censoring are not masked.
    """
    c = config
    x0 = {
        "L": noise["L0"],
        "M": np.exp(noise["M0"]),
        "N": c.sd_n * noise["N0"],
        "P": (noise["P0"] < c.p_0).astype(float),
        "Q": _ordinal(noise["Q0"], c.q0_prevalence),
    }
    x0["O"] = (noise["O0"] < expit(c.delta_0 + 2 * x0["L"])).astype(float)
    x0 = _derived(x0)
    n = len(noise["L0"])
    if a0 is None:
        A0 = (noise["A0"] < expit(c.alpha_0 + _linear(c.phi_0, x0))).astype(float)
    else:
        A0 = np.broadcast_to(np.asarray(a0, dtype=float), (n,)).copy()
    if c.censored and not uncensored:
        pc = expit(c.mu_1 + _linear(c.mu_c, x0) + c.lam * A0)
        C1 = (noise["C1"] < pc).astype(float)
    else:
        C1 = np.zeros(n)
    g = c.gamma
    x1 = {
        "L": c.beta * x0["L"] + g[0] * A0 + noise["L1"],
        "M": np.exp(c.beta * x0["M"] + g[1] * A0 + noise["M1"]),
        "N": c.beta * x0["N"] + g[2] * A0 + c.sd_n * noise["N1"],
        "P": (noise["P1"] < expit(c.mu_0 + c.beta * x0["P"] + g[4] * A0)).astype(float),
        "Q": _ordinal(noise["Q1"], c.q1_prevalence),
    }
    x1["O"] = (noise["O1"] < expit(c.delta_1 + c.beta * x0["O"] + 2 * x1["L"] + g[3] * A0)).astype(float)
    x1 = _derived(x1)
    if a1 is None:
        A1 = (noise["A1"] < expit(c.alpha_1 + _linear(c.phi_1, x1) + c.theta * A0)).astype(float)
    else:
        A1 = np.broadcast_to(np.asarray(a1, dtype=float), (n,)).copy()
    eta = (c.alpha_y + _linear(c.beta_y_0, x0) + _linear(c.beta_y_1, x1)
           + c.beta_a0 * A0 + c.beta_a1 * A1)
    Y = (noise["Y"] < expit(eta)).astype(float)
    return {"X0": x0, "X1": x1, "A0": A0, "C1": C1, "A1": A1, "Y": Y}


def to_panel(world: dict, ids=None, name: str = "") -> PanelDataset:
    """Pack a structural draw into a :class:`PanelDataset` (censored cells masked)."""
    n = len(world["A0"])
    cov = np.stack([np.column_stack([world["X0"][v] for v in COVARIATES]),
                    np.column_stack([world["X1"][v] for v in COVARIATES])], axis=1)
    cens = np.column_stack([np.zeros(n), world["C1"]]).astype(np.int8)
    trt = np.column_stack([world["A0"], world["A1"]])
    y = world["Y"].copy()
    out = cens[:, 1] == 1
    cov[out, 1, :] = np.nan
    trt[out, 1] = np.nan
    y[out] = np.nan
    ids = np.arange(1, n + 1) if ids is None else np.asarray(ids)
    return PanelDataset(ids, cov, trt, cens, y, COVARIATE_SPECS, extra={"scenario": name})


def generate_scenario(config: ScenarioConfig, seed, n: int | None = None,
                      rep: int = 0) -> PanelDataset:
    """Simulate one observational dataset of ``n`` (default ``config.n``) subjects."""
    rng = make_rng(seed, rep, _STAGE_DATA)
    noise = draw_noise(config.n if n is None else n, rng)
    return to_panel(structural(config, noise), name=config.name)


# ---------------------------------------------------------------------------
# Truth and estimation


@dataclass(frozen=True)
class MsmTruth:
    """Parameters of logit E[Y^(a0,a1)] = b0 + b1 a0 + b2 a1 from counterfactual data."""

    coefficients: tuple
    standard_errors: tuple
    N: int

    @property
    def odds_ratios(self) -> tuple:
        return (float(np.exp(self.coefficients[1])), float(np.exp(self.coefficients[2])))


@dataclass(frozen=True)
class MsmEstimate:
    coefficients: tuple
    n_used: int

    @property
    def odds_ratios(self) -> tuple:
        return (float(np.exp(self.coefficients[1])), float(np.exp(self.coefficients[2])))


def _logistic_se(X, y, beta):
    p = expit(X @ beta)
    info = (X * (p * (1 - p))[:, None]).T @ X
    return np.sqrt(np.diag(np.linalg.inv(info)))


def truth_oracle(config: ScenarioConfig, N: int = ORACLE_N, seed=0) -> MsmTruth:
    """Monte Carlo MSM parameters from the four forced-treatment worlds.

    The same covariate noise is shared across the worlds; the stacked 4N
    rows are fitted with unit weights. Standard errors ignore the within-
    subject correlation and so are conservative for contrasts.
    """
    if N < 100:
        raise DomainError("oracle sample size must be at least 100")
    noise = draw_noise(N, make_rng(seed, 0, _STAGE_ORACLE))
    a0s, a1s, ys = [], [], []
    for a0 in (0.0, 1.0):
        for a1 in (0.0, 1.0):
            w = structural(config, noise, a0=a0, a1=a1, uncensored=True)
            a0s.append(np.full(N, a0))
            a1s.append(np.full(N, a1))
            ys.append(w["Y"])
    X = np.column_stack([np.ones(4 * N), np.concatenate(a0s), np.concatenate(a1s)])
    y = np.concatenate(ys)
    fit = fit_weighted_logistic(X, y)
    se = _logistic_se(X, y, fit.coefficients)
    return MsmTruth(tuple(float(b) for b in fit.coefficients), tuple(float(s) for s in se), N)


def estimate_msm(data: PanelDataset, weights: WeightSet | np.ndarray | None = None) -> MsmEstimate:
    """Weighted logistic MSM of Y on (A_0, A_1) among subjects followed to the end."""
    keep = data.uncensored(data.T)
    if weights is not None:
        w = weights.values if isinstance(weights, WeightSet) else np.asarray(weights, dtype=float)
        keep = keep & ~np.isnan(w)
    else:
        w = np.ones(data.n)
    rows = np.flatnonzero(keep)
    y = data.outcome[rows]
    if np.isnan(y).any():
        raise DomainError("outcome missing for weight-bearing subjects")
    X = np.column_stack([np.ones(len(rows)), data.treatment[rows, 0], data.treatment[rows, data.T]])
    fit = fit_weighted_logistic(X, y, w[rows])
    return MsmEstimate(tuple(float(b) for b in fit.coefficients), len(rows))


def parameter_bias(estimate, truth) -> tuple:
    """Per-parameter odds-ratio differences exp(b_hat_j) - exp(b_j), j = 1, 2."""
    e, t = estimate.odds_ratios, truth.odds_ratios
    return (e[0] - t[0], e[1] - t[1])


def aggregate_bias(diffs, aggregation: str = DEFAULT_AGGREGATION) -> float:
    """Collapse per-parameter differences to one number.

    ``mean_signed`` (default) averages the signed differences, so estimation
    noise cancels across replicates; ``mean_abs`` averages magnitudes and has
    a positive floor of order the estimator's standard error.
    """
    d = np.asarray(diffs, dtype=float)
    if aggregation == "mean_abs":
        return float(np.mean(np.abs(d)))
    if aggregation == "abs_mean":
        return float(abs(np.mean(d)))
    if aggregation == "mean_signed":
        return float(np.mean(d))
    raise DomainError(f"unknown bias aggregation {aggregation!r}; choose from {BIAS_AGGREGATIONS}")


def bias(estimate, truth, aggregation: str = DEFAULT_AGGREGATION) -> float:
    """Scalar bias over the two treatment odds ratios."""
    return aggregate_bias(parameter_bias(estimate, truth), aggregation)


# ---------------------------------------------------------------------------
# Regimes


def regime_factors(data: PanelDataset, spec=SIMPLE) -> np.ndarray:
    """Per-time factors W_0, W_1 (times the censoring factor when censoring occurs)."""
    models = fit_treatment_models(data, spec, "marginal_W")
    f = treatment_factors(data, models, "marginal_W")
    if data.censored.any():
        f = f * censoring_factors(data, fit_censoring_models(data, spec))
    return f


def regime_weights(data: PanelDataset, factors: np.ndarray,
                   percentile: float = TRUNCATION_PERCENTILE) -> dict:
    """The six weighting regimes; subjects not followed to the end get NaN."""
    followed = data.uncensored(data.T)
    cens = bool(data.censored.any())
    fam = "combined_WAC" if cens else "marginal_W"

    def ws(v, family="partial", tr=(0, 1)):
        return WeightSet(family, np.where(followed, v, np.nan), tr, ids=data.ids)

    f0 = truncate_factor(factors, 0, percentile)
    f1 = truncate_factor(factors, 1, percentile)
    return {
        "unweighted": ws(np.ones(data.n), "custom", ()),
        "W0xW1": ws(factors[:, 0] * factors[:, 1], fam),
        "W1": ws(factors[:, 1], tr=(1,)),
        "W0": ws(factors[:, 0], tr=(0,)),
        "W0tr90xW1": ws(f0[:, 0] * f0[:, 1]),
        "W0xW1tr90": ws(f1[:, 0] * f1[:, 1]),
    }


# ---------------------------------------------------------------------------
# Replicates


@dataclass
class ReplicateResult:
    rep: int
    records: list = field(default_factory=list)
    estimates: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    censor_fraction: float = 0.0


def run_replicate(config: ScenarioConfig, seed: int, rep: int, truth: MsmTruth,
                  ps_specs=("simple",), metrics=ALL_METRICS, regimes=REGIMES,
                  aggregation: str = DEFAULT_AGGREGATION) -> ReplicateResult:
    """One dataset: fit PS models, build regimes, record balance and bias."""
    out = ReplicateResult(rep)
    schedule = list(BALANCE_CELLS.values())
    try:
        data = generate_scenario(config, seed, rep=rep)
    except BalanceGaugeError as exc:
        out.failures.append({"rep": rep, "ps_spec": "", "regime": "", "error": str(exc)})
        return out
    out.censor_fraction = data.censor_fraction(1)
    for ps in ps_specs:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                weights = regime_weights(data, regime_factors(data, PS_SPECS[ps]))
        except BalanceGaugeError as exc:
            out.failures.append({"rep": rep, "ps_spec": ps, "regime": "", "error": str(exc)})
            continue
        for regime in regimes:
            w = weights[regime]
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    est = estimate_msm(data, w)
                    report = balance_table(data, w, metrics, schedule)
            except BalanceGaugeError as exc:
                out.failures.append({"rep": rep, "ps_spec": ps, "regime": regime, "error": str(exc)})
                continue
            d = parameter_bias(est, truth)
            b = aggregate_bias(d, aggregation)
            out.estimates.append({"rep": rep, "ps_spec": ps, "regime": regime, "n_used": est.n_used,
                                  "logor_a0": est.coefficients[1], "logor_a1": est.coefficients[2],
                                  "bias_a0": d[0], "bias_a1": d[1], "bias": b})
            for m in report.metrics:
                agg = report.aggregate(m)
                rec = {"rep": rep, "ps_spec": ps, "regime": regime, "metric": m}
                rec.update({col: agg[tk] for col, tk in BALANCE_CELLS.items()})
                rec["bias"] = b
                out.records.append(rec)
            for (t, k, m), msg in report.failures.items():
                out.failures.append({"rep": rep, "ps_spec": ps, "regime": regime,
                                     "error": f"{m} at (t={t}, k={k}): {msg}"})
    return out


def _replicate_task(args):
    with threadpool_limits(limits=1):
        return run_replicate(*args)


@dataclass
class Archive:
    """Campaign output for one scenario."""

    scenario: str
    records: pd.DataFrame
    estimates: pd.DataFrame
    failures: pd.DataFrame
    truth: MsmTruth
    censor_fractions: np.ndarray

    def summary(self) -> pd.DataFrame:
        """Average balance and bias per (ps_spec, regime, metric)."""
        g = self.records.groupby(["ps_spec", "regime", "metric"], sort=False)
        return g[["bal_A0X0", "bal_A1X0", "bal_A1X1", "bias"]].mean().reset_index()

    def mean_bias(self, regime: str, ps_spec: str = "simple") -> float:
        e = self.estimates
        return float(e.loc[(e.regime == regime) & (e.ps_spec == ps_spec), "bias"].mean())

    def write(self, directory) -> dict:
        os.makedirs(directory, exist_ok=True)
        stem = os.path.join(directory, self.scenario)
        paths = {"archive": f"{stem}.csv", "estimates": f"{stem}_estimates.csv",
                 "failures": f"{stem}_failures.csv", "summary": f"{stem}_summary.csv"}
        fmt = "%.10g"
        self.records.to_csv(paths["archive"], index=False, float_format=fmt)
        self.estimates.to_csv(paths["estimates"], index=False, float_format=fmt)
        self.failures.to_csv(paths["failures"], index=False)
        self.summary().to_csv(paths["summary"], index=False, float_format=fmt)
        return paths


def run_replicates(config: ScenarioConfig, reps: int, seed: int, *, ps_specs=("simple",),
                   metrics=ALL_METRICS, regimes=REGIMES, jobs: int = 1,
                   truth: MsmTruth | None = None, oracle_n: int = ORACLE_N,
                   aggregation: str = DEFAULT_AGGREGATION) -> Archive:
    """Simulate ``reps`` datasets and collect balance/bias records.

    Results are independent of ``jobs``: every replicate draws from its own
    (seed, rep) stream and records are ordered by replicate index.
    """
    if reps < 1:
        raise DomainError("reps must be at least 1")
    unknown = [p for p in ps_specs if p not in PS_SPECS]
    if unknown:
        raise DomainError(f"unknown PS specification(s) {unknown}; choose from {list(PS_SPECS)}")
    bad = [r for r in regimes if r not in REGIMES]
    if bad:
        raise DomainError(f"unknown regime(s) {bad}; choose from {list(REGIMES)}")
    aggregate_bias((0.0,), aggregation)
    if truth is None:
        # single-threaded BLAS here too, so the truth does not depend on the host
        with threadpool_limits(limits=1):
            truth = truth_oracle(config, oracle_n, seed)
    tasks = [(config, seed, r, truth, tuple(ps_specs), tuple(metrics), tuple(regimes), aggregation)
             for r in range(reps)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=max(1, reps // (4 * jobs))))
    else:
        results = [_replicate_task(t) for t in tasks]
    results.sort(key=lambda r: r.rep)
    recs = [x for r in results for x in r.records]
    ests = [x for r in results for x in r.estimates]
    fails = [x for r in results for x in r.failures]
    for f in fails:
        log.warning("replicate %s %s %s: %s", f["rep"], f["ps_spec"], f["regime"], f["error"])
    return Archive(
        config.name,
        pd.DataFrame(recs, columns=ARCHIVE_COLUMNS),
        pd.DataFrame(ests, columns=ESTIMATE_COLUMNS),
        pd.DataFrame(fails, columns=["rep", "ps_spec", "regime", "error"]),
        truth,
        np.array([r.censor_fraction for r in results]),
    )
