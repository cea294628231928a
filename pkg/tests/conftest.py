from __future__ import annotations

import pytest

from dfmnet import kernels


@pytest.fixture(params=["compiled", "reference"])
def kernel_mode(request):
    """Run a test once through the compiled kernels and once through numpy."""
    if request.param == "compiled" and not kernels.AVAILABLE:
        pytest.skip("numba not available")
    prev = kernels.ENABLED
    kernels.ENABLED = request.param == "compiled"
    yield request.param
    kernels.ENABLED = prev


def pytest_terminal_summary(terminalreporter):
    from helpers import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
