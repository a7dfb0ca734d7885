import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from unmix_gmm import _backend  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=sorted(_backend.available()))
def backend(request, monkeypatch):
    """Run a test once per available kernel implementation."""
    from unmix_gmm import unmix as unmix_mod

    monkeypatch.setattr(unmix_mod, "kernels", _backend.get(request.param))
    return request.param
