"""Weighted logistic regression (IRLS) and ordinary least squares."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.special import expit

from .errors import (DegenerateResponseError, DomainError, NumericalWarning,
                     RankDeficiencyError)

PROB_FLOOR = 1e-12
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
DIVERGENCE_BOUND = 30.0
RIDGE = 1e-6
COLLINEAR_CORR = 1 - 1e-12


@dataclass(frozen=True)
class DesignSpec:
    """Which covariate columns enter a model and whether pairwise products are added.

    ``terms=None`` means every column supplied to :func:`build_design`.
    """

    terms: tuple | None = None
    complexity: str = "simple"

    def __post_init__(self):
        if self.complexity not in ("simple", "complex"):
            raise DomainError(f"complexity must be 'simple' or 'complex', got {self.complexity!r}")
        if self.terms is not None:
            object.__setattr__(self, "terms", tuple(self.terms))


SIMPLE = DesignSpec()
COMPLEX = DesignSpec(complexity="complex")


@dataclass
class Design:
    X: np.ndarray
    names: list[str]
    dropped_columns: list[str] = field(default_factory=list)

    @property
    def shape(self):
        return self.X.shape


def expand_terms(columns: np.ndarray, names: list[str], spec: DesignSpec):
    """Main effects (and pairwise products for complex specs), no intercept."""
    columns = np.asarray(columns, dtype=float)
    if columns.ndim == 1:
        columns = columns[:, None]
    if spec.terms is not None:
        missing = [t for t in spec.terms if t not in names]
        if missing:
            raise DomainError(f"design terms not found: {missing}")
        idx = [names.index(t) for t in spec.terms]
        columns, names = columns[:, idx], [names[i] for i in idx]
    cols, out_names = [columns], list(names)
    if spec.complexity == "complex" and columns.shape[1] > 1:
        pairs = list(combinations(range(columns.shape[1]), 2))
        a = np.array([i for i, _ in pairs])
        b = np.array([j for _, j in pairs])
        cols.append(columns[:, a] * columns[:, b])
        out_names += [f"{names[i]}:{names[j]}" for i, j in pairs]
    return np.hstack(cols), out_names


def build_design(columns, names=None, spec: DesignSpec = SIMPLE) -> Design:
    """Intercept + expanded terms, with constant and duplicate columns dropped.

    ``columns`` may be a :class:`~balancegauge.panel.CovariateBlock`.
    """
    if hasattr(columns, "columns") and names is None:
        columns, names = columns.columns, columns.names
    columns = np.asarray(columns, dtype=float)
    if columns.ndim == 1:
        columns = columns[:, None]
    if names is None:
        names = [f"x{j}" for j in range(columns.shape[1])]
    if columns.shape[0] == 0:
        raise DomainError("cannot build a design from an empty block")
    X, names = expand_terms(columns, list(names), spec)
    keep, dropped = filter_columns(X, names)
    X = np.hstack([np.ones((X.shape[0], 1)), X[:, keep]])
    return Design(X, ["(Intercept)"] + [names[j] for j in keep], dropped)


def filter_columns(X: np.ndarray, names: list[str]):
    """Indices of columns to keep; constant columns and near-duplicates are dropped."""
    if X.shape[1] == 0:
        return [], []
    sd = X.std(axis=0)
    scale = np.maximum(np.abs(X).max(axis=0), 1.0)
    nonconst = sd > 1e-12 * scale
    keep, dropped = [], [names[j] for j in np.flatnonzero(~nonconst)]
    cand = np.flatnonzero(nonconst)
    if len(cand):
        Z = (X[:, cand] - X[:, cand].mean(axis=0)) / sd[cand]
        corr = (Z.T @ Z) / X.shape[0]
        for pos, j in enumerate(cand):
            if any(abs(corr[pos, q]) > COLLINEAR_CORR for q in range(pos) if cand[q] in keep):
                dropped.append(names[j])
            else:
                keep.append(j)
    return keep, dropped


@dataclass
class GlmFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    deviance: float
    dropped_columns: list[str] = field(default_factory=list)
    names: list[str] | None = None
    penalized: bool = False
    warnings: list[str] = field(default_factory=list)


def _check_inputs(X, y, w):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
    if not (X.shape[0] == len(y) == len(w)):
        raise DomainError(f"row mismatch: X has {X.shape[0]}, y {len(y)}, w {len(w)}")
    if (w < 0).any() or not np.isfinite(w).all():
        raise DomainError("weights must be finite and nonnegative")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DomainError("logistic response must be 0/1")
    return X, y, w


def _deviance(y, p, w):
    p = np.clip(p, PROB_FLOOR, 1 - PROB_FLOOR)
    return float(-2 * np.sum(w * (y * np.log(p) + (1 - y) * np.log1p(-p))))


def fit_weighted_logistic(X, y, w=None, *, tol: float = IRLS_TOL,
                          max_iter: int = IRLS_MAX_ITER, names=None) -> GlmFit:
    """Maximise the weighted Bernoulli log-likelihood by IRLS.

    ``X`` must already contain the intercept column if one is wanted (see
    :func:`build_design`). Raises :class:`DegenerateResponseError` when one
    response class carries no weight. Falls back to a tiny ridge penalty on
    non-intercept columns if the unpenalised iteration diverges.
    """
    if isinstance(X, Design):
        names = X.names if names is None else names
        dropped = list(X.dropped_columns)
        X = X.X
    else:
        dropped = []
    X, y, w = _check_inputs(X, y, w)
    w1 = w[y == 1].sum()
    w0 = w[y == 0].sum()
    if w1 <= 0 or w0 <= 0:
        raise DegenerateResponseError("response is constant among positively weighted rows")
    fit = _irls(X, y, w, 0.0, tol, max_iter)
    if np.abs(fit.coefficients).max() > DIVERGENCE_BOUND or not np.isfinite(fit.coefficients).all():
        msg = "IRLS diverged (possible separation); refitting with ridge penalty"
        warnings.warn(msg, NumericalWarning, stacklevel=2)
        fit = _irls(X, y, w, RIDGE, tol, max_iter)
        fit.penalized = True
        fit.warnings.append(msg)
    if not fit.converged:
        msg = f"IRLS did not converge in {max_iter} iterations"
        warnings.warn(msg, NumericalWarning, stacklevel=2)
        fit.warnings.append(msg)
    fit.names = names
    fit.dropped_columns = dropped
    return fit


def _irls(X, y, w, ridge, tol, max_iter) -> GlmFit:
    n, p = X.shape
    has_intercept = np.allclose(X[:, 0], 1.0)
    beta = np.zeros(p)
    ybar = np.average(y, weights=w)
    if has_intercept:
        beta[0] = np.log(ybar / (1 - ybar))
    penalty = np.full(p, ridge)
    if has_intercept:
        penalty[0] = 0.0
    sw = w.sum()
    dev = _deviance(y, expit(X @ beta), w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = expit(eta)
        var = np.clip(mu * (1 - mu), 1e-300, None)
        grad = X.T @ (w * (y - mu)) - penalty * sw * beta
        H = (X * (w * var)[:, None]).T @ X + np.diag(penalty * sw)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        # Step halving keeps the penalised deviance from increasing.
        for _ in range(30):
            new = beta + step
            new_dev = _deviance(y, expit(X @ new), w) + penalty @ (new * new) * sw
            if new_dev <= dev + 1e-9 * (abs(dev) + 1) or not np.isfinite(dev):
                break
            step = step / 2
        beta, dev = new, new_dev
        if np.abs(beta).max() > 1e3:
            break
        if np.linalg.norm(step) <= tol * max(1.0, np.linalg.norm(beta)):
            converged = True
            break
    return GlmFit(beta, converged, it, _deviance(y, expit(X @ beta), w))


def predict_proba(fit: GlmFit, X) -> np.ndarray:
    """Fitted probabilities, bounded away from 0 and 1."""
    if isinstance(X, Design):
        X = X.X
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != len(fit.coefficients):
        raise DomainError(f"design has {X.shape[1]} columns, fit has {len(fit.coefficients)}")
    p = expit(X @ fit.coefficients)
    clipped = (p < PROB_FLOOR) | (p > 1 - PROB_FLOOR)
    if clipped.any():
        warnings.warn(f"{int(clipped.sum())} probabilities clipped to "
                      f"[{PROB_FLOOR}, 1-{PROB_FLOOR}] (near positivity violation)",
                      NumericalWarning, stacklevel=2)
        p = np.clip(p, PROB_FLOOR, 1 - PROB_FLOOR)
    return p


@dataclass
class OlsFit:
    coefficients: np.ndarray
    r_squared: float
    intercept: float
    names: list[str] | None = None
    residuals: np.ndarray | None = None


OLS_RANK_TOL = 1e-10


def fit_ols(X, y, names=None) -> OlsFit:
    """Least squares via QR; R^2 = 1 - SSE/SST.

    Rank is judged on the column-equilibrated design: a singular value below
    ``OLS_RANK_TOL`` times the largest marks the design rank deficient and the
    columns involved in the null direction are reported.
    """
    if isinstance(X, Design):
        names = X.names if names is None else names
        X = X.X
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != len(y):
        raise DomainError(f"row mismatch: X has {X.shape[0]}, y has {len(y)}")
    if names is None:
        names = [f"x{j}" for j in range(X.shape[1])]
    if X.shape[0] < X.shape[1]:
        raise RankDeficiencyError(f"{X.shape[0]} rows < {X.shape[1]} columns", names)
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst <= 1e-300:
        raise DegenerateResponseError("response is constant (SST = 0)")
    norms = np.linalg.norm(X, axis=0)
    if (norms == 0).any():
        zero = [names[j] for j in np.flatnonzero(norms == 0)]
        raise RankDeficiencyError(f"all-zero column(s): {zero}", zero)
    Xs = X / norms
    _, s, vt = np.linalg.svd(Xs, full_matrices=False)
    if s[-1] < OLS_RANK_TOL * s[0]:
        null = vt[-1]
        involved = [names[j] for j in np.flatnonzero(np.abs(null) > 1e-3)]
        raise RankDeficiencyError(
            f"design is rank deficient; collinear columns: {involved}", involved)
    q, r = np.linalg.qr(X)
    beta = np.linalg.solve(r, q.T @ y)
    resid = y - X @ beta
    r2 = min(max(1.0 - float(resid @ resid) / sst, 0.0), 1.0)
    has_intercept = np.allclose(X[:, 0], 1.0)
    return OlsFit(beta, r2, float(beta[0]) if has_intercept else 0.0, list(names), resid)
