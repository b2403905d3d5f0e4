import numpy as np
import pytest

from salora import _fallback, linalg

try:
    from salora import _kernels
except ImportError:
    _kernels = None


@pytest.fixture(params=["compiled", "python"])
def backend(request, monkeypatch):
    """Run a test once per kernel implementation."""
    if request.param == "compiled":
        if _kernels is None:
            pytest.skip("compiled kernels not built")
        monkeypatch.setattr(linalg, "kernels", _kernels)
    else:
        monkeypatch.setattr(linalg, "kernels", _fallback)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[n])
