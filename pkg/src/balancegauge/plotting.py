"""Plot-ready curves (CSV) and optional matplotlib rendering.

The curve builders return tidy data frames; :func:`render_figures` turns
them into PNG files and is the only place matplotlib is imported.
"""

from __future__ import annotations

import os

import numpy as np
import pandas as pd

from .errors import DomainError
from .glm import SIMPLE, build_design, fit_weighted_logistic, predict_proba
from .metrics import KDE_GRID, WeightedEcdf, _binned_kde, silverman_bandwidth, split_groups
from .panel import PanelDataset, covariate_block
from .weights import WeightSet, history_columns


def _weights_array(data: PanelDataset, weights) -> np.ndarray:
    if weights is None:
        return np.ones(data.n)
    w = weights.values if isinstance(weights, WeightSet) else np.asarray(weights, dtype=float)
    if len(w) != data.n:
        raise DomainError(f"weights cover {len(w)} subjects, panel has {data.n}")
    return w


def _group_curves(x, g, w, kind: str, label: str) -> pd.DataFrame:
    (x1, w1), (x0, w0) = split_groups(x, g, w)
    frames = []
    if kind == "ecdf":
        for grp, (xs, ws) in ((1, (x1, w1)), (0, (x0, w0))):
            f = WeightedEcdf(xs, ws)
            pts = f.breakpoints
            frames.append(pd.DataFrame({"x": pts, "group": grp, "value": f(pts)}))
    else:
        h = max(silverman_bandwidth(x1, w1), silverman_bandwidth(x0, w0))
        lo, hi = min(x1.min(), x0.min()), max(x1.max(), x0.max())
        if h == 0:
            h = max(hi - lo, 1.0) / KDE_GRID
        grid = np.linspace(lo - 3 * h, hi + 3 * h, KDE_GRID)
        delta = grid[1] - grid[0]
        for grp, (xs, ws) in ((1, (x1, w1)), (0, (x0, w0))):
            hg = max(silverman_bandwidth(xs, ws), delta / 2)
            frames.append(pd.DataFrame({"x": grid, "group": grp,
                                        "value": _binned_kde(xs, ws, grid, hg)}))
    out = pd.concat(frames, ignore_index=True)
    out.insert(0, "series", label)
    out["kind"] = kind
    return out


def covariate_curves(data: PanelDataset, weights=None, t: int = 0, k: int = 0,
                     covariate: str | None = None, kind: str = "ecdf") -> pd.DataFrame:
    """Weighted ECDF or density of X_{t-k} by A_t group, for one or all covariates.

    Columns: series, x, group, value, kind, t, k. ``series`` is the encoded covariate name.
    """
    if kind not in ("ecdf", "density"):
        raise DomainError("kind must be 'ecdf' or 'density'")
    w = _weights_array(data, weights)
    block = covariate_block(data, t, k, mask=~np.isnan(w))
    if covariate is not None and covariate not in block.names:
        raise DomainError(f"unknown covariate {covariate!r}; have {block.names}")
    names = block.names if covariate is None else [covariate]
    frames = [_group_curves(block.columns[:, block.names.index(nm)], block.group,
                            w[block.rows], kind, nm) for nm in names]
    out = pd.concat(frames, ignore_index=True)
    out["t"], out["k"] = t, k
    return out


def propensity_curves(data: PanelDataset, weights=None, t: int = 0, spec=SIMPLE,
                      kind: str = "density") -> pd.DataFrame:
    """Distribution of the estimated propensity score P(A_t | history) by group, weighted.

    The score model is fitted without weights on subjects uncensored at ``t``;
    the weights only enter the group distributions.
    """
    w = _weights_array(data, weights)
    rows = np.flatnonzero(data.uncensored(t) & ~np.isnan(w))
    cols, names = history_columns(data, t, rows, t, t)
    design = build_design(cols, names, spec)
    a = data.treatment[rows, t]
    ps = predict_proba(fit_weighted_logistic(design, a), design)
    out = _group_curves(ps, a.astype(int), w[rows], kind, f"ps_t{t}")
    out["t"], out["k"] = t, 0
    return out


def balance_scatter(archive: pd.DataFrame, metric: str) -> pd.DataFrame:
    """Bias against each balance variable for one metric (long format)."""
    sub = archive.loc[archive["metric"] == metric]
    return sub.melt(id_vars=["rep", "ps_spec", "regime", "bias"],
                    value_vars=["bal_A0X0", "bal_A1X0", "bal_A1X1"],
                    var_name="balance_variable", value_name="balance")


def render_figures(curves: dict, out_dir) -> list[str]:
    """Render each curve frame to ``<out_dir>/<name>.png``.

    ``curves`` maps a file stem to a frame from :func:`covariate_curves`,
    :func:`propensity_curves` or :func:`balance_scatter`.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for stem, df in curves.items():
        if "balance_variable" in df.columns:
            fig, axes = plt.subplots(1, 3, figsize=(11, 3.4), sharey=True)
            for ax, (var, sub) in zip(axes, df.groupby("balance_variable", sort=True)):
                for regime, r in sub.groupby("regime", sort=False):
                    ax.scatter(r["balance"], r["bias"], s=6, label=regime, alpha=0.6)
                ax.set_xlabel(var)
            axes[0].set_ylabel("bias")
            axes[-1].legend(fontsize=7, markerscale=2)
        else:
            series = list(dict.fromkeys(df["series"]))
            ncol = min(3, len(series))
            nrow = int(np.ceil(len(series) / ncol))
            fig, axes = plt.subplots(nrow, ncol, figsize=(3.6 * ncol, 2.8 * nrow), squeeze=False)
            for ax, name in zip(axes.flat, series):
                sub = df.loc[df["series"] == name]
                for grp, r in sub.groupby("group"):
                    style = dict(drawstyle="steps-post") if r["kind"].iat[0] == "ecdf" else {}
                    ax.plot(r["x"], r["value"], label=f"A={grp}", **style)
                ax.set_title(name, fontsize=9)
            for ax in list(axes.flat)[len(series):]:
                ax.set_visible(False)
            axes.flat[0].legend(fontsize=7)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{stem}.png")
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths

