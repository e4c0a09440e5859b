import numpy as np
import pytest

from shortcutfm.net import VelocityNet


def crandn(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    """float64 net with random (non-zero) output layer: 5 bins, width 8."""
    return VelocityNet.create(5, seed=3, hidden=8, n_blocks=2, embed_dim=4, dtype="float64", zero_output=False)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
