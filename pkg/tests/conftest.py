import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from confidence_energy import _kernels

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["native", "python"])
def backend(request, monkeypatch):
    """Run a test under the selected kernels and again under the numpy fallback."""
    if request.param == "python":
        monkeypatch.setattr(_kernels, "count_geq", _kernels._fallback.count_geq)
        monkeypatch.setattr(_kernels, "level_argmin", _kernels._fallback.level_argmin)
    return request.param


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
