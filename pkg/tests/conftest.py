import json
from pathlib import Path

import numpy as np
import pytest

from metasample import brdf_core as bc
from metasample.models import BRDFPCA

ORACLES = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())


@pytest.fixture(scope="session")
def oracles():
    return ORACLES


@pytest.fixture(scope="session")
def family():
    """Eight synthetic tables shared across tests (tabulation is the slow part)."""
    return [bc.synth_brdf(s) for s in bc.synthetic_family(8, 123, "fam")]


@pytest.fixture(scope="session")
def pca(family):
    return BRDFPCA(n_components=5).fit(family)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def central_diff(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
