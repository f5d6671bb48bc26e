"""Longitudinal panel data: subjects x time-points with treatment and censoring.

The on-disk layout is a long CSV with one row per (subject, time)::

    id,time,censored,treatment,<cov1>,<cov2>,...

plus a companion outcome file ``id,outcome``. Covariate and treatment cells
are empty once a subject is censored; censoring is absorbing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import DomainError, PanelValidationError, SchemaError

KINDS = ("continuous", "binary", "ordinal")
ENCODINGS = ("numeric_score", "dummy")
RESERVED = ("id", "time", "censored", "treatment")


@dataclass(frozen=True)
class CovariateSpec:
    """How a covariate is typed and how it enters design matrices.

    Ordinal covariates carry their ordered ``levels``. With ``numeric_score``
    encoding a level enters models as its 1-based position; ``dummy``
    expands it into K-1 indicators (first level is the reference).
    """

    name: str
    kind: str = "continuous"
    encoding: str = "numeric_score"
    levels: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"covariate {self.name!r}: unknown kind {self.kind!r}")
        if self.encoding not in ENCODINGS:
            raise SchemaError(f"covariate {self.name!r}: unknown encoding {self.encoding!r}")
        object.__setattr__(self, "levels", tuple(self.levels))
        if self.kind == "ordinal" and len(self.levels) < 2:
            raise SchemaError(f"ordinal covariate {self.name!r} needs at least 2 levels")
        if self.kind == "binary" and not self.levels:
            object.__setattr__(self, "levels", (0, 1))

    @property
    def encoded_names(self) -> list[str]:
        if self.kind == "ordinal" and self.encoding == "dummy":
            return [f"{self.name}[{lvl}]" for lvl in self.levels[1:]]
        return [self.name]

    @property
    def encoded_kinds(self) -> list[str]:
        if self.kind == "ordinal" and self.encoding == "dummy":
            return ["binary"] * (len(self.levels) - 1)
        return [self.kind]

    def encode(self, values: np.ndarray) -> np.ndarray:
        """Map raw values to design columns, shape (len(values), n_encoded)."""
        values = np.asarray(values, dtype=float)
        if self.kind != "ordinal":
            return values[:, None]
        scores = encode_ordinal(values, self.levels)
        if self.encoding == "numeric_score":
            return scores[:, None]
        k = len(self.levels)
        return (scores[:, None] == np.arange(2, k + 1)[None, :]).astype(float)

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateSpec":
        unknown = set(d) - {"name", "kind", "encoding", "levels"}
        if unknown:
            raise SchemaError(f"unknown covariate spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "encoding": self.encoding,
                "levels": list(self.levels)}


def encode_ordinal(values, levels) -> np.ndarray:
    """Level values -> integer scores 1..K (NaN passes through)."""
    values = np.asarray(values, dtype=float)
    lookup = {float(lvl): i + 1 for i, lvl in enumerate(levels)}
    out = np.full(values.shape, np.nan)
    ok = ~np.isnan(values)
    try:
        out[ok] = [lookup[v] for v in values[ok]]
    except KeyError as exc:
        raise SchemaError(f"value {exc.args[0]!r} is not a declared level {list(levels)}") from None
    return out


def decode_ordinal(scores, levels) -> np.ndarray:
    """Inverse of :func:`encode_ordinal`."""
    scores = np.asarray(scores, dtype=float)
    lv = np.asarray(levels, dtype=float)
    out = np.full(scores.shape, np.nan)
    ok = ~np.isnan(scores)
    out[ok] = lv[scores[ok].astype(int) - 1]
    return out


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Immutable panel of ``n`` subjects observed at ``T_plus_1`` time-points.

    Arrays are indexed ``[subject, time]`` (and ``[..., covariate]`` for
    ``covariates``). Cells after censoring hold NaN; ``outcome`` is NaN for
    subjects censored by the last time-point.
    """

    ids: np.ndarray
    covariates: np.ndarray
    treatment: np.ndarray
    censored: np.ndarray
    outcome: np.ndarray
    specs: tuple[CovariateSpec, ...]
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("ids", "covariates", "treatment", "censored", "outcome"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name))))
        object.__setattr__(self, "specs", tuple(self.specs))
        validate_panel(self)

    @property
    def n(self) -> int:
        return self.treatment.shape[0]

    @property
    def T_plus_1(self) -> int:
        return self.treatment.shape[1]

    @property
    def T(self) -> int:
        return self.T_plus_1 - 1

    @property
    def covariate_names(self) -> list[str]:
        return [s.name for s in self.specs]

    def uncensored(self, t: int) -> np.ndarray:
        """Boolean mask of subjects still under follow-up at ``t``."""
        return self.censored[:, t] == 0

    def censor_fraction(self, t: int) -> float:
        return float(np.mean(self.censored[:, t]))

    def equals(self, other: "PanelDataset") -> bool:
        same = [np.array_equal(getattr(self, a), getattr(other, a), equal_nan=True)
                for a in ("covariates", "treatment", "censored", "outcome")]
        return (all(same) and np.array_equal(self.ids, other.ids)
                and self.specs == other.specs)


def validate_panel(data: PanelDataset) -> None:
    n, tp1 = data.treatment.shape
    if data.covariates.shape[:2] != (n, tp1) or data.covariates.shape[2] != len(data.specs):
        raise SchemaError("covariate array shape does not match treatment/specs")
    if data.censored.shape != (n, tp1) or data.outcome.shape != (n,):
        raise SchemaError("censoring/outcome array shapes do not match treatment")
    if len(np.unique(data.ids)) != n:
        raise SchemaError("subject ids are not unique")
    c = data.censored
    if not np.isin(c, (0, 1)).all():
        raise SchemaError("censoring indicator must be 0/1")
    bad = np.any(np.diff(c, axis=1) < 0, axis=1)
    if bad.any():
        raise PanelValidationError(
            f"non-monotone censoring for subject id {data.ids[np.argmax(bad)]}")
    obs = c == 0
    a = data.treatment
    if np.isnan(a[obs]).any():
        raise PanelValidationError("missing treatment for an uncensored (subject, time) cell")
    if not np.isin(a[obs], (0, 1)).all():
        raise SchemaError("treatment must be 0/1")
    if not np.isnan(a[~obs]).all():
        raise PanelValidationError("treatment recorded after censoring")
    x = data.covariates
    if np.isnan(x[obs]).any():
        i, t = np.argwhere(np.isnan(x).any(axis=2) & obs)[0]
        raise PanelValidationError(
            f"missing covariate value for uncensored subject id {data.ids[i]} at time {t}")
    if not np.isnan(x[~obs]).all():
        raise PanelValidationError("covariate values recorded after censoring")
    y = data.outcome
    followed = obs[:, -1]
    if np.isnan(y).all():
        return  # no outcome supplied; fine for balance checking
    if np.isnan(y[followed]).any():
        raise PanelValidationError("missing outcome for a subject followed to the end")
    if not np.isin(y[followed], (0, 1)).all():
        raise SchemaError("outcome must be 0/1")


@dataclass(frozen=True, eq=False)
class CovariateBlock:
    """Encoded covariates X_{t-k} for subjects uncensored at ``t``, grouped by A_t."""

    target_time: int
    lag: int
    columns: np.ndarray
    names: list[str]
    kinds: list[str]
    group: np.ndarray
    rows: np.ndarray

    @property
    def source_time(self) -> int:
        return self.target_time - self.lag


def encode_covariates(data: PanelDataset, time: int, rows=None) -> tuple[np.ndarray, list, list]:
    """Design-ready covariate columns at ``time`` with names and kinds."""
    x = data.covariates[:, time, :] if rows is None else data.covariates[rows, time, :]
    cols, names, kinds = [], [], []
    for j, spec in enumerate(data.specs):
        cols.append(spec.encode(x[:, j]))
        names.extend(spec.encoded_names)
        kinds.extend(spec.encoded_kinds)
    return np.hstack(cols), names, kinds


def covariate_block(data: PanelDataset, t: int, k: int, mask=None) -> CovariateBlock:
    """Block comparing X_{t-k} between A_t groups among subjects uncensored at ``t``.

    ``mask`` optionally restricts rows further (e.g. to subjects carrying a weight).
    """
    if not (0 <= k <= t <= data.T):
        raise DomainError(f"need 0 <= k <= t <= T, got t={t}, k={k}, T={data.T}")
    keep = data.uncensored(t)
    if mask is not None:
        keep = keep & np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(keep)
    cols, names, kinds = encode_covariates(data, t - k, rows)
    return CovariateBlock(t, k, cols, names, kinds, data.treatment[rows, t].astype(int), rows)


# ---------------------------------------------------------------------------
# CSV I/O


def load_schema(path) -> list[CovariateSpec]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if isinstance(raw, dict):
        raw = raw.get("covariates", [])
    return [CovariateSpec.from_dict(d) for d in raw]


def load_panel(path, schema: Sequence[CovariateSpec] | None = None,
               outcome_path=None) -> PanelDataset:
    """Read and validate a long-format panel CSV.

    Without ``schema`` every non-reserved column is taken as continuous.
    ``outcome_path`` defaults to ``<stem>_outcome.csv`` next to ``path``; when
    no outcome file exists the outcome is left entirely missing, which is
    enough for weighting and balance checking.
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"panel file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=float, encoding="utf-8", keep_default_na=False,
                         na_values=[""], float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: empty file") from None
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric field ({exc})") from None
    header = list(df.columns)
    missing = [c for c in RESERVED if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing required column(s) {missing}")
    cov_cols = [c for c in header if c not in RESERVED]
    if schema is None:
        schema = [CovariateSpec(c) for c in cov_cols]
    names = [s.name for s in schema]
    unknown = [c for c in cov_cols if c not in names]
    if unknown:
        raise SchemaError(f"{path}: unknown column(s) {unknown}")
    absent = [c for c in names if c not in cov_cols]
    if absent:
        raise SchemaError(f"{path}: schema column(s) {absent} not in file")

    for col in ("id", "time", "censored"):
        if df[col].isna().any():
            line = int(np.flatnonzero(df[col].isna())[0]) + 2
            raise SchemaError(f"{path}:{line}: empty {col!r} field")
    for col in ("censored", "treatment"):
        vals = df[col].dropna()
        bad = ~vals.isin((0.0, 1.0))
        if bad.any():
            line = int(vals.index[np.argmax(bad.to_numpy())]) + 2
            raise SchemaError(f"{path}:{line}: {col} must be 0/1, got {vals[bad].iloc[0]!r}")

    times = np.sort(df["time"].unique())
    if not np.array_equal(times, np.arange(len(times))):
        raise SchemaError(f"{path}: time must run 0..T without gaps, got {times.tolist()}")
    ids = df["id"].unique()
    ids.sort()
    n, tp1 = len(ids), len(times)
    if len(df) != n * tp1 or df.duplicated(["id", "time"]).any():
        raise SchemaError(f"{path}: expected exactly one row per (id, time)")

    df = df.sort_values(["id", "time"], kind="stable")
    censored = df["censored"].to_numpy().reshape(n, tp1).astype(np.int8)
    treatment = df["treatment"].to_numpy().reshape(n, tp1)
    cov = np.stack([df[s.name].to_numpy().reshape(n, tp1) for s in schema], axis=2)
    for j, s in enumerate(schema):
        if s.kind == "ordinal":
            encode_ordinal(cov[..., j], s.levels)  # raises on undeclared levels
        if s.kind == "binary":
            v = cov[..., j]
            if not np.isin(v[~np.isnan(v)], (0, 1)).all():
                raise SchemaError(f"binary covariate {s.name!r} has values other than 0/1")

    if outcome_path is None:
        guess = path.with_name(path.stem + "_outcome.csv")
        outcome_path = guess if guess.exists() else None
    outcome = np.full(n, np.nan)
    if outcome_path is not None:
        out = pd.read_csv(outcome_path, dtype=float, keep_default_na=False, na_values=[""],
                          float_precision="round_trip")
        if list(out.columns) != ["id", "outcome"]:
            raise SchemaError(f"{outcome_path}: header must be 'id,outcome'")
        pos = np.searchsorted(ids, out["id"].to_numpy())
        if (pos >= n).any() or not np.array_equal(ids[np.minimum(pos, n - 1)], out["id"].to_numpy()):
            raise SchemaError(f"{outcome_path}: outcome ids not present in panel")
        outcome[pos] = out["outcome"].to_numpy()
        bad = ~np.isnan(outcome) & ~np.isin(outcome, (0.0, 1.0))
        if bad.any():
            raise SchemaError(f"{outcome_path}: outcome must be 0/1")
    data_ids = ids.astype(np.int64) if np.all(ids == np.round(ids)) else ids
    # Outcome is only meaningful for subjects followed to the end.
    outcome[censored[:, -1] == 1] = np.nan
    return PanelDataset(data_ids, cov, treatment, censored, outcome, tuple(schema))


def write_panel(data: PanelDataset, path, outcome_path=None) -> None:
    """Write ``data`` in the long CSV layout (exact float round-trip)."""
    path = Path(path)
    n, tp1 = data.n, data.T_plus_1
    cols = {
        "id": np.repeat(data.ids, tp1),
        "time": np.tile(np.arange(tp1), n),
        "censored": data.censored.reshape(-1).astype(int),
        "treatment": data.treatment.reshape(-1),
    }
    for j, s in enumerate(data.specs):
        cols[s.name] = data.covariates[:, :, j].reshape(-1)
    df = pd.DataFrame(cols)
    df.to_csv(path, index=False, float_format="%.17g", na_rep="")
    if outcome_path is None:
        outcome_path = path.with_name(path.stem + "_outcome.csv")
    pd.DataFrame({"id": data.ids, "outcome": data.outcome}).to_csv(
        outcome_path, index=False, float_format="%.17g", na_rep="")


def write_schema(specs: Sequence[CovariateSpec], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"covariates": [s.to_dict() for s in specs]}, fh, indent=2)
