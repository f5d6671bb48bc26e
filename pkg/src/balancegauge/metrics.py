"""Weighted two-group balance metrics.

Every function takes covariate values ``x`` (1-D for univariate metrics,
2-D ``(rows, covariates)`` for the global ones), a 0/1 ``group`` vector
(treatment at the target time) and optional nonnegative ``weights``. Values
are on a common scale where 0 means perfect balance.

Within each group weights are rescaled to sum to the group's row count ``m``
before computing variances, which are then divided by ``m - 1``; with unit
weights this reduces to the usual unbiased estimator.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import DegenerateCovariateError, DegenerateGroupError, NumericalWarning
from .glm import build_design, fit_weighted_logistic

UNIVARIATE = ("D", "SMD", "OVL", "KS", "LD")
GLOBAL = ("MHB", "CS", "GWD")
ALL_METRICS = UNIVARIATE + GLOBAL

KDE_GRID = 512
LEVY_TOL = 1e-6
PINV_RCOND = 1e-10
SCORE_TOL = 1e-12


def split_groups(x, group, weights=None):
    """Return ``(x1, w1), (x0, w0)`` for treated and untreated rows with positive weight."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(group).astype(bool)
    w = np.ones(len(g)) if weights is None else np.asarray(weights, dtype=float)
    if len(g) != x.shape[0] or len(w) != len(g):
        raise ValueError("x, group and weights must have the same number of rows")
    # zero-weight rows are dropped so they do not count towards m
    keep = w > 0
    x1, w1, x0, w0 = x[g & keep], w[g & keep], x[~g & keep], w[~g & keep]
    if len(w1) == 0 or len(w0) == 0 or w1.sum() <= 0 or w0.sum() <= 0:
        raise DegenerateGroupError("both treatment groups need rows with positive weight")
    return (x1, w1), (x0, w0)


def weighted_mean(x, w):
    return np.tensordot(w, x, axes=(0, 0)) / w.sum()


def weighted_var(x, w):
    """Weighted variance with weights rescaled to the row count (unbiased at unit weights)."""
    m = len(w)
    if m < 2:
        return np.full(np.shape(x)[1:], np.nan) if np.ndim(x) > 1 else np.nan
    wn = w * (m / w.sum())
    d = x - weighted_mean(x, w)
    return np.tensordot(wn, d * d, axes=(0, 0)) / (m - 1)


def weighted_cov(X, w):
    m = len(w)
    wn = w * (m / w.sum())
    d = X - weighted_mean(X, w)
    return (d * wn[:, None]).T @ d / (m - 1)


# ---------------------------------------------------------------------------
# Univariate metrics


def mean_difference(x, group, weights=None) -> float:
    """|weighted mean(treated) - weighted mean(untreated)|."""
    (x1, w1), (x0, w0) = split_groups(x, group, weights)
    return float(abs(weighted_mean(x1, w1) - weighted_mean(x0, w0)))


def smd(x, group, weights=None) -> float:
    """Absolute difference in means over the pooled SD sqrt((s1^2 + s0^2) / 2)."""
    (x1, w1), (x0, w0) = split_groups(x, group, weights)
    pooled = (weighted_var(x1, w1) + weighted_var(x0, w0)) / 2
    if not pooled > 0:
        raise DegenerateCovariateError("pooled variance is zero (constant covariate)")
    return float(abs(weighted_mean(x1, w1) - weighted_mean(x0, w0)) / np.sqrt(pooled))


def _weighted_quantile(x, w, q):
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order]
    cw = np.cumsum(ws)
    # Midpoint plotting positions; reduces to type-7-like interpolation at unit weights.
    pos = (cw - ws / 2) / cw[-1]
    return np.interp(q, pos, xs)


def silverman_bandwidth(x, w) -> float:
    """0.9 * min(sd, IQR/1.34) * m_eff^(-1/5) with Kish effective sample size."""
    sd = np.sqrt(max(weighted_var(x, w), 0.0)) if len(x) > 1 else 0.0
    q1, q3 = _weighted_quantile(x, w, [0.25, 0.75])
    iqr = (q3 - q1) / 1.34
    spread = min(sd, iqr) if iqr > 0 else sd
    m_eff = w.sum() ** 2 / np.sum(w * w)
    return 0.9 * spread * m_eff ** (-0.2)


def _binned_kde(x, w, grid, h):
    """Gaussian KDE on an even grid via linear binning and discrete convolution."""
    delta = grid[1] - grid[0]
    pos = (x - grid[0]) / delta
    lo = np.clip(np.floor(pos).astype(int), 0, len(grid) - 2)
    frac = np.clip(pos - lo, 0.0, 1.0)
    counts = np.bincount(lo, weights=w * (1 - frac), minlength=len(grid))
    counts += np.bincount(lo + 1, weights=w * frac, minlength=len(grid))
    half = min(int(np.ceil(4 * h / delta)), len(grid) - 1)
    offsets = np.arange(-half, half + 1) * delta
    kernel = np.exp(-0.5 * (offsets / h) ** 2)
    # full convolution then the centred window; mode="same" misbehaves when the kernel is longer
    dens = np.convolve(counts, kernel)[half: half + len(grid)] if half > 0 else counts.copy()
    area = np.trapezoid(dens, grid)
    return dens / area if area > 0 else dens


def overlap(x, group, weights=None, kind: str = "continuous") -> float:
    """1 - OVL, where OVL is the area under the minimum of the two group densities.

    Discrete covariates (``binary``/``ordinal``) use probability masses;
    continuous ones use weighted Gaussian KDEs on a shared grid, each
    normalised to unit area on that grid.
    """
    (x1, w1), (x0, w0) = split_groups(x, group, weights)
    if kind in ("binary", "ordinal"):
        support = np.union1d(x1, x0)
        p1 = np.bincount(np.searchsorted(support, x1), weights=w1, minlength=len(support)) / w1.sum()
        p0 = np.bincount(np.searchsorted(support, x0), weights=w0, minlength=len(support)) / w0.sum()
        return float(max(0.0, 1.0 - np.minimum(p1, p0).sum()))
    h1, h0 = silverman_bandwidth(x1, w1), silverman_bandwidth(x0, w0)
    lo, hi = min(x1.min(), x0.min()), max(x1.max(), x0.max())
    hmax = max(h1, h0)
    if hi == lo and hmax == 0:
        return 0.0 if x1[0] == x0[0] else 1.0
    if hmax == 0:
        hmax = (hi - lo) / KDE_GRID
    grid = np.linspace(lo - 3 * hmax, hi + 3 * hmax, KDE_GRID)
    delta = grid[1] - grid[0]
    f1 = _binned_kde(x1, w1, grid, max(h1, delta / 2))
    f0 = _binned_kde(x0, w0, grid, max(h0, delta / 2))
    ovl = np.trapezoid(np.minimum(f1, f0), grid)
    return float(min(max(1.0 - ovl, 0.0), 1.0))


class WeightedEcdf:
    """Right-continuous weighted empirical CDF."""

    def __init__(self, x, w):
        order = np.argsort(x, kind="stable")
        self.x = np.asarray(x, dtype=float)[order]
        cw = np.cumsum(np.asarray(w, dtype=float)[order])
        self.cum = np.concatenate([[0.0], cw / cw[-1]])

    def __call__(self, u):
        return self.cum[np.searchsorted(self.x, u, side="right")]

    @property
    def breakpoints(self):
        return np.unique(self.x)


def ks_distance(x, group, weights=None) -> float:
    """max |F1 - F0| over the pooled sample points."""
    (x1, w1), (x0, w0) = split_groups(x, group, weights)
    f1, f0 = WeightedEcdf(x1, w1), WeightedEcdf(x0, w0)
    pts = np.union1d(x1, x0)
    return float(min(np.max(np.abs(f1(pts) - f0(pts))), 1.0))


def _levy_feasible(f1, f0, b1, b0, eps, slack=1e-12):
    # sup_x F0(x - eps) - F1(x) is reached where F0 jumps; likewise for the upper bound.
    lower = np.max(f0(b0) - f1(b0 + eps))
    upper = np.max(f1(b1) - f0(b1 + eps))
    return lower <= eps + slack and upper <= eps + slack


def levy_distance(x, group, weights=None, tol: float = LEVY_TOL) -> float:
    """Smallest eps with F0(x-eps)-eps <= F1(x) <= F0(x+eps)+eps for all x.

    Found by bisection on [0, KS]; the returned value is feasible and within
    ``tol`` of the infimum.
    """
    (x1, w1), (x0, w0) = split_groups(x, group, weights)
    f1, f0 = WeightedEcdf(x1, w1), WeightedEcdf(x0, w0)
    b1, b0 = f1.breakpoints, f0.breakpoints
    pts = np.union1d(b1, b0)
    hi = float(np.max(np.abs(f1(pts) - f0(pts))))
    lo = 0.0
    if _levy_feasible(f1, f0, b1, b0, 0.0):
        return 0.0
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if _levy_feasible(f1, f0, b1, b0, mid):
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# Global metrics


def _as_matrix(X):
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def mahalanobis_balance(X, group, weights=None) -> float:
    """(m1 - m0)' S^-1 (m1 - m0) with S the average of the weighted group covariances.

    Columns with zero pooled variance are dropped. A (near-)singular S is
    handled with the Moore-Penrose pseudo-inverse and a warning.
    """
    X = _as_matrix(X)
    (X1, w1), (X0, w0) = split_groups(X, group, weights)
    S = (weighted_cov(X1, w1) + weighted_cov(X0, w0)) / 2
    diff = weighted_mean(X1, w1) - weighted_mean(X0, w0)
    var = np.diag(S)
    keep = var > 1e-12 * max(var.max(), 1e-300)
    if not keep.any():
        raise DegenerateCovariateError("all covariates have zero pooled variance")
    S, diff = S[np.ix_(keep, keep)], diff[keep]
    # Scale to a correlation matrix before judging conditioning.
    d = 1 / np.sqrt(np.diag(S))
    R = S * d[:, None] * d[None, :]
    z = diff * d
    eig = np.linalg.eigvalsh(R)
    if eig[0] < PINV_RCOND * eig[-1]:
        warnings.warn("pooled covariance is singular; using pseudo-inverse "
                      f"(smallest/largest eigenvalue {eig[0] / eig[-1]:.2e})",
                      NumericalWarning, stacklevel=2)
        sol = np.linalg.pinv(R, rcond=PINV_RCOND, hermitian=True) @ z
    else:
        sol = np.linalg.solve(R, z)
    return float(max(z @ sol, 0.0))


def weighted_auc(score, group, weights=None) -> float:
    """Weighted concordance: P(score_treated > score_untreated), ties count 1/2."""
    score = np.asarray(score, dtype=float)
    g = np.asarray(group).astype(bool)
    w = np.ones(len(g)) if weights is None else np.asarray(weights, dtype=float)
    uniq, inv = np.unique(score, return_inverse=True)
    w1 = np.bincount(inv, weights=np.where(g, w, 0.0), minlength=len(uniq))
    w0 = np.bincount(inv, weights=np.where(g, 0.0, w), minlength=len(uniq))
    below0 = np.cumsum(w0) - w0
    total = w1.sum() * w0.sum()
    if total <= 0:
        raise DegenerateGroupError("both groups need positive weight for the AUC")
    return float(np.sum(w1 * (below0 + 0.5 * w0)) / total)


def post_weighting_cstat(X, group, weights=None, auc_weighted: bool = False) -> float:
    """2 * (C - 0.5) for the propensity model refit in the weighted sample.

    ``C`` is the AUC of the refit model's linear predictor (main effects
    only), folded so that C >= 0.5. With ``auc_weighted`` false the AUC is
    taken over the unweighted rows, so it measures how well the direction of
    the refit model separates the groups rather than its weighted fit.
    """
    X = _as_matrix(X)
    split_groups(X, group, weights)
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    design = build_design(X)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NumericalWarning)
        fit = fit_weighted_logistic(design, np.asarray(group, dtype=float), w)
    slopes = fit.coefficients[1:]
    if not len(slopes) or np.abs(slopes).max() < SCORE_TOL:
        return 0.0
    score = design.X[:, 1:] @ slopes
    # ties that differ only by rounding in the matrix product stay ties
    scale = np.abs(score).max()
    score = np.round(score / scale / SCORE_TOL) if scale > 0 else score
    c = weighted_auc(score, group, w if auc_weighted else None)
    return float(2 * (max(c, 1 - c) - 0.5))


GWD_MODES = ("sum", "mean")


def gwd_terms(X, group, weights=None):
    """Per-term contributions to the general weighted difference.

    Returns ``(contributions, degenerate)``: one entry per pair 0 <= a <= b <= C
    with X_0 = 1, where degenerate terms (zero pooled SD) contribute 0.
    """
    X = _as_matrix(X)
    (X1, w1), (X0, w0) = split_groups(X, group, weights)
    c = X.shape[1]
    a_idx, b_idx = np.triu_indices(c + 1)
    ones1, ones0 = np.ones((len(X1), 1)), np.ones((len(X0), 1))
    Z1 = np.hstack([ones1, X1])
    Z0 = np.hstack([ones0, X0])
    P1 = Z1[:, a_idx] * Z1[:, b_idx]
    P0 = Z0[:, a_idx] * Z0[:, b_idx]
    diff = np.abs(weighted_mean(P1, w1) - weighted_mean(P0, w0))
    s = np.sqrt((weighted_var(P1, w1) + weighted_var(P0, w0)) / 2)
    scale = np.maximum(np.abs(P1).max(axis=0), 1.0)
    degenerate = ~(s > 1e-12 * scale)
    coef = np.where(a_idx == 0, 1.0, 0.5)
    contrib = np.zeros(len(diff))
    contrib[~degenerate] = coef[~degenerate] * diff[~degenerate] / s[~degenerate]
    return contrib, degenerate


def gwd(X, group, weights=None, mode: str = "mean") -> float:
    """General weighted difference over main terms, squares and pairwise products.

    ``mode='sum'`` returns the plain weighted sum; ``mode='mean'`` divides it by
    the number of non-degenerate terms so that the value is commensurate with
    per-covariate metrics.
    """
    if mode not in GWD_MODES:
        raise ValueError(f"mode must be one of {GWD_MODES}")
    contrib, degenerate = gwd_terms(X, group, weights)
    if degenerate.all():
        warnings.warn("every GWD term is degenerate; returning 0", NumericalWarning, stacklevel=2)
        return 0.0
    total = float(contrib.sum())
    return total if mode == "sum" else total / int((~degenerate).sum())
