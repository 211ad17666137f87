import numpy as np
import pytest
from hypothesis import settings

from martingale_pe import diffusion_env as de

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")


@pytest.fixture(scope="session")
def bm():
    """Standard Brownian motion on [0, 1] with terminal reward x."""
    return de.brownian(sigma=1.0, x0=0.0, horizon=1.0)


@pytest.fixture(scope="session")
def grid100():
    return de.TimeGrid(0.0, 1.0, 100)


@pytest.fixture(scope="session")
def bm_batch(bm, grid100):
    return de.sample_batch(bm, grid100, 4000, 123)


def rel_err(a, b):
    return np.max(np.abs(np.asarray(a) - np.asarray(b)) / np.maximum(np.abs(np.asarray(b)), 1e-300))


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, aggregated over its sub-checks."""
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not getattr(mod, "VERDICTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for crit, checks in sorted(mod.VERDICTS.items()):
        ok = all(c[1] for c in checks)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {crit}: {mod.TITLES[crit]}")
        for name, good, detail in checks:
            terminalreporter.write_line(f"    {'ok  ' if good else 'FAIL'} {name}: {detail}")
