import numpy as np
import pytest

from lla.locker import lock_model
from lla.model import SynthConfig, synth_model


@pytest.fixture(scope="session")
def planted():
    return synth_model(SynthConfig(), 0)


@pytest.fixture(scope="session")
def planted_gated():
    return synth_model(SynthConfig(kind="gated", activation="silu"), 0)


@pytest.fixture(scope="session")
def locked64(planted):
    return lock_model(planted, 64, 16, seed=7)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
