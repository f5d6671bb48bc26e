"""Scenario parameterisations for the two-time-point simulation design."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import DomainError, SchemaError

TREATMENT_COVARIATES = ("L", "M", "N", "O", "P", "Q", "T", "R", "V", "Z")
CENSORING_COVARIATES = ("L", "M", "N", "O", "P", "Q")


def _coefs(**given) -> dict:
    out = {c: 0.0 for c in TREATMENT_COVARIATES}
    for k, v in given.items():
        if k not in out:
            raise DomainError(f"unknown covariate {k!r}")
        out[k] = float(v)
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    """Every parameter of the generating equations.

    ``phi_0``/``phi_1`` are the treatment-model coefficients at t=0/1 and
    ``beta_y_0``/``beta_y_1`` the outcome coefficients for covariates measured
    at t=0/1, each keyed by covariate letter. ``gamma`` holds the effects of
    A_0 on L_1, M_1, N_1, O_1, P_1. ``mu_1 is None`` means no censoring.
    """

    name: str = "base"
    n: int = 10_000
    # time 0
    delta_0: float = -0.05
    alpha_0: float = -1.3
    phi_0: dict = field(default_factory=lambda: _coefs(L=0.05, M=0.05, N=0.1, O=0.75, P=0.5, Q=0.4))
    p_0: float = 0.2
    q0_prevalence: tuple = (0.5, 0.3, 0.1, 0.05, 0.05)
    # time 1
    beta: float = 0.0
    gamma: tuple = (-1.0, -0.5, -0.25, -0.5, -0.75)
    delta_1: float = 1.23
    mu_0: float = -1.1
    alpha_1: float = -1.7
    phi_1: dict = field(default_factory=lambda: _coefs(L=0.05, M=0.05, N=0.1, O=0.75, P=0.5, Q=0.4))
    theta: float = 0.69
    q1_prevalence: tuple = (0.4, 0.3, 0.2, 0.05, 0.05)
    # outcome
    alpha_y: float = -4.3
    beta_y_0: dict = field(default_factory=lambda: _coefs(L=0.5, M=0.5, N=0.05, O=1, P=1, Q=0.2))
    beta_y_1: dict = field(default_factory=lambda: _coefs(L=0.5, M=0.5, N=0.05, O=1, P=1, Q=0.2))
    beta_a0: float = -0.69
    beta_a1: float = -0.69
    # censoring at t=1
    mu_1: float | None = None
    mu_c: dict = field(default_factory=lambda: {c: 0.0 for c in CENSORING_COVARIATES})
    lam: float = 0.0
    # scale of N_t (standard deviation)
    sd_n: float = 10.0

    def __post_init__(self):
        for name in ("phi_0", "phi_1", "beta_y_0", "beta_y_1"):
            d = dict(getattr(self, name))
            bad = set(d) - set(TREATMENT_COVARIATES)
            if bad:
                raise SchemaError(f"{name}: unknown covariates {sorted(bad)}")
            object.__setattr__(self, name, {c: float(d.get(c, 0.0)) for c in TREATMENT_COVARIATES})
        mc = dict(self.mu_c)
        bad = set(mc) - set(CENSORING_COVARIATES)
        if bad:
            raise SchemaError(f"mu_c: unknown covariates {sorted(bad)}")
        object.__setattr__(self, "mu_c", {c: float(mc.get(c, 0.0)) for c in CENSORING_COVARIATES})
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        for name in ("q0_prevalence", "q1_prevalence"):
            q = tuple(float(v) for v in getattr(self, name))
            if len(q) < 2 or abs(sum(q) - 1) > 1e-9 or min(q) < 0:
                raise SchemaError(f"{name} must be a probability vector with >= 2 entries")
            object.__setattr__(self, name, q)
        if len(self.gamma) != 5:
            raise SchemaError("gamma needs 5 entries (effects of A_0 on L, M, N, O, P)")
        if self.n < 2:
            raise SchemaError("n must be at least 2")

    @property
    def censored(self) -> bool:
        return self.mu_1 is not None

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma"] = list(self.gamma)
        d["q0_prevalence"] = list(self.q0_prevalence)
        d["q1_prevalence"] = list(self.q1_prevalence)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(f"cannot read scenario file {path}: {exc}") from None


BASE = ScenarioConfig(name="scenario1")

_NONLINEAR_OUTCOME = dict(
    alpha_y=-3.1,
    beta_y_0=_coefs(L=0.4, M=0.03, N=0.03, O=0.75, P=0.75, Q=0.2, T=0.4, R=0.02, V=0.04, Z=0.5),
    beta_y_1=_coefs(L=0.4, M=0.03, N=0.03, O=0.75, P=0.75, Q=0.2, T=0.4, R=0.02, V=0.04, Z=0.5),
)

_SCENARIOS = {
    "1": BASE,
    "2": BASE.with_(name="scenario2", alpha_0=-3.08, alpha_1=-3.37, alpha_y=-5.1),
    "3": BASE.with_(name="scenario3", n=1_000),
    "4": BASE.with_(
        name="scenario4", alpha_0=-3.25, alpha_1=-2.93,
        phi_0=_coefs(L=1, M=1, N=0.1, O=2, P=2, Q=0.4),
        phi_1=_coefs(L=1, M=1, N=0.1, O=2, P=2, Q=0.4),
        alpha_y=-0.75, beta_y_0=_coefs(), beta_y_1=_coefs()),
    "5": BASE.with_(
        name="scenario5", alpha_0=-0.05, alpha_1=-0.2,
        phi_0=_coefs(L=0.01, M=0.01, N=0.02, O=0.02, P=0.01, Q=0.01),
        phi_1=_coefs(L=0.01, M=0.01, N=0.02, O=0.02, P=0.01, Q=0.01),
        gamma=(0, 0, 0, 0, 0), delta_1=-4.5, mu_0=0.0, theta=0.0,
        alpha_y=-20.5,
        beta_y_0=_coefs(L=1, M=1, N=0.1, O=2, P=2, Q=0.4),
        beta_y_1=_coefs(L=1, M=1, N=0.1, O=2, P=2, Q=0.4),
        beta_a0=0.0, beta_a1=0.0),
    "6": BASE.with_(
        name="scenario6", alpha_0=-3.25, alpha_1=-2.95,
        phi_0=_coefs(L=1, M=1, N=0.1, O=2, P=2, Q=0.4),
        phi_1=_coefs(L=1, M=1, N=0.1, O=2, P=2, Q=0.4),
        theta=0.0, alpha_y=-4.07),
    "7": BASE.with_(name="scenario7", theta=0.0, **_NONLINEAR_OUTCOME),
    "8": BASE.with_(
        name="scenario8", alpha_0=-1.14, alpha_1=-1.5, mu_0=-1.08,
        phi_0=_coefs(L=0.05, M=0.05, N=0.1, O=0.5, P=0.25, Q=0.4, T=0.01, R=0.02, V=0.01, Z=0.1),
        phi_1=_coefs(L=0.05, M=0.05, N=0.1, O=0.5, P=0.25, Q=0.4, T=0.01, R=0.02, V=0.01, Z=0.1),
        **_NONLINEAR_OUTCOME),
    "9": BASE.with_(
        name="scenario9", alpha_0=-0.37, alpha_1=-0.59, mu_0=-1.08,
        phi_0=_coefs(L=0.2, M=0.03, N=0.02, O=0, P=1.5, Q=0.01, T=0.01, R=0.02),
        phi_1=_coefs(L=0.2, M=0.03, N=0.02, O=0, P=1.5, Q=0.01, T=0.01, R=0.02),
        alpha_y=-2.0,
        beta_y_0=_coefs(L=0.4, M=0.03, N=0.03, O=0, P=0.75, Q=0.2, T=0.4, R=0.02),
        beta_y_1=_coefs(L=0.4, M=0.03, N=0.03, O=0, P=0.75, Q=0.2, T=0.4, R=0.02)),
    "10": BASE.with_(
        name="scenario10", alpha_0=-0.4, alpha_1=-0.6, delta_1=1.21, mu_0=-1.08,
        phi_0=_coefs(L=0.2, M=0.03, N=0.02, O=0.5, P=0.25, Q=0.01, T=0.01, R=0.02, V=0.01, Z=0.1),
        phi_1=_coefs(L=0.2, M=0.03, N=0.02, O=0.5, P=0.25, Q=0.01, T=0.01, R=0.02, V=0.01, Z=0.1),
        alpha_y=-2.0,
        beta_y_0=_coefs(L=0.4, M=0, N=0.03, O=0.75, P=0.75, Q=0.2, T=0.4, R=0, V=0.04, Z=0.5),
        beta_y_1=_coefs(L=0.4, M=0, N=0.03, O=0.75, P=0.75, Q=0.2, T=0.4, R=0, V=0.04, Z=0.5)),
    "censored_base": BASE.with_(
        name="censored_base", mu_1=-2.7,
        mu_c={"L": 0.04, "M": 0.05, "N": 0.02, "O": 1.0, "P": 0.02, "Q": 0.01}, lam=1.0),
}

SCENARIO_IDS = tuple(_SCENARIOS)


def builtin_scenario(scenario_id) -> ScenarioConfig:
    """Return a built-in scenario by id: 1..10 or ``censored_base``."""
    key = str(scenario_id).strip().lower().replace("-", "_")
    key = {"base": "1", "censored": "censored_base"}.get(key, key)
    if key not in _SCENARIOS:
        raise DomainError(f"unknown scenario {scenario_id!r}; choose from {', '.join(SCENARIO_IDS)}")
    return _SCENARIOS[key]
