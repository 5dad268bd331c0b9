import numpy as np
import pytest

from streakfit import harness


@pytest.fixture(scope="session")
def scenario_a():
    """Noisy type-A triple used by several modules' tests."""
    return harness.random_scenario("A", 60.0, 4.0, np.random.default_rng(11))


@pytest.fixture(scope="session")
def clean_scenario_b():
    """Noiseless, hole-free type-B triple."""
    return harness.random_scenario("B", 60.0, None, np.random.default_rng(5), holes=0)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance.py::test_criterion_" not in rep.nodeid:
                continue
            name = rep.nodeid.split("::")[-1]
            number = int(name.split("_")[2])
            summary = dict(rep.user_properties).get("summary", "")
            lines.append((number, f"criterion {number:2d} {'PASS' if outcome == 'passed' else 'FAIL'}: {summary}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
