import numpy as np
import pytest

from balancegauge.panel import CovariateSpec, PanelDataset
from balancegauge.scenarios import builtin_scenario
from balancegauge.simulate import generate_scenario


@pytest.fixture(scope="session")
def base_panel():
    return generate_scenario(builtin_scenario("1"), seed=5, n=2000)


@pytest.fixture(scope="session")
def censored_panel():
    return generate_scenario(builtin_scenario("censored_base"), seed=5, n=2000)


def make_panel(n=60, T=2, seed=0, censor_last=0):
    """Tiny hand-built panel: one continuous, one binary, one ordinal covariate."""
    rng = np.random.default_rng(seed)
    specs = (CovariateSpec("x"), CovariateSpec("b", "binary"),
             CovariateSpec("q", "ordinal", levels=(1, 2, 3)))
    cov = np.stack([rng.normal(size=(n, T + 1)),
                    rng.integers(0, 2, (n, T + 1)).astype(float),
                    rng.integers(1, 4, (n, T + 1)).astype(float)], axis=2)
    a = (rng.random((n, T + 1)) < 0.5).astype(float)
    c = np.zeros((n, T + 1), dtype=np.int8)
    if censor_last:
        c[:censor_last, T] = 1
        a[:censor_last, T] = np.nan
        cov[:censor_last, T, :] = np.nan
    y = (rng.random(n) < 0.3).astype(float)
    y[c[:, T] == 1] = np.nan
    return PanelDataset(np.arange(1, n + 1), cov, a, c, y, specs)


@pytest.fixture
def tiny_panel():
    return make_panel()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
