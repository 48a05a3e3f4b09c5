import numpy as np
import pytest

from ddpstar import model, scenarios
from ddpstar.formula import DesignMatrices


def make_design(X, Z=(), K=(), tau_priors=None) -> DesignMatrices:
    """Design assembled by hand (no term parsing)."""
    X = np.asarray(X, dtype=float)
    Z = [np.asarray(z, dtype=float) for z in Z]
    K = [np.asarray(k, dtype=float) for k in K]
    return DesignMatrices(X, Z, K, [f"x{j}" for j in range(X.shape[1])],
                          [f"z{r}" for r in range(len(Z))],
                          tau_priors or [None] * len(Z), {})


@pytest.fixture(scope="session")
def scenario1_small():
    """A short Scenario I fit shared by functional, diagnostic and I/O tests."""
    df = scenarios.generate("I", 200, seed=7)
    draws = model.fit(df, "smooth(x, J=12)", iters=400, burnin=100, seed=3)
    return df, draws


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.pytest_terminal_summary_lines():
        terminalreporter.write_line(line)
