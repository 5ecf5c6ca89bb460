import numpy as np
import pytest

from rnnpack import backend


@pytest.fixture(params=backend.available_backends())
def kernel_backend(request):
    """Run the decorated test once per available kernel backend."""
    with backend.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion, when that suite ran."""
    lines = {}
    for status in ("passed", "failed", "error", "skipped"):
        for report in terminalreporter.stats.get(status, []):
            name = getattr(report, "nodeid", "")
            if "test_acceptance.py" not in name or report.when != "call":
                continue
            short = name.split("::")[-1]
            lines[short] = "PASS" if status == "passed" else status.upper()
    if lines:
        terminalreporter.section("acceptance criteria")
        for name in sorted(lines):
            terminalreporter.write_line(f"{name}: {lines[name]}")
