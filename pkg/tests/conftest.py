import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from jbasim import DeviceParams, ReadoutModel, ReadoutPulse

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def device():
    return DeviceParams()


@pytest.fixture(scope="session")
def model(device):
    """Readout model at the default operating point, Delta = 0.38 GHz."""
    return ReadoutModel.at_detuning(device, 0.38)


@pytest.fixture(scope="session")
def pulse(model):
    """Sample-and-hold pulse 17 MHz below f_C0; the power is set per test."""
    return ReadoutPulse(f_drive=model.readout_frequency(17.0), P_S=-41.1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
