import numpy as np
import pytest

from sptransduct._accel import NUMBA_AVAILABLE, use_backend

BACKENDS = ["numba", "numpy"] if NUMBA_AVAILABLE else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    with use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(20200615)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance_log(request):
    """Record one verdict line per acceptance criterion; printed in the terminal summary."""
    def log(label, verdict, detail=""):
        line = f"{label}: {verdict}" + (f"  ({detail})" if detail else "")
        request.config.acceptance_lines.append(line)
        print(line)
    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
