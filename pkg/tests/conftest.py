import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("suite", deadline=None, derandomize=True, max_examples=50)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of every run."""
    results: dict[str, str] = {}
    for status in ("failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::" in nodeid:
                results[nodeid.split("::")[-1]] = "FAIL"
    for report in terminalreporter.stats.get("passed", []):
        nodeid = getattr(report, "nodeid", "")
        if "test_acceptance.py::" in nodeid and getattr(report, "when", "") == "call":
            results.setdefault(nodeid.split("::")[-1], "PASS")
    if results:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for name in sorted(results):
            terminalreporter.write_line(f"  {name}: {results[name]}")
