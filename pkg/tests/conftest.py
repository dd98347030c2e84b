"""Shared pytest wiring.

Tests marked ``@pytest.mark.acceptance(n)`` feed a per-criterion summary
printed at the end of the run: one PASS/FAIL/NOT RUN line per criterion.
A criterion passes only when every test carrying its number passed.
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERION_NAMES = {
    1: "inside algorithm vs brute-force enumeration",
    2: "analytic gradients vs finite differences",
    3: "emitted distributions normalize",
    4: "child-scale invariance vs baseline entanglement",
    5: "distribution metrics vs direct-summation oracles",
    6: "masked-likelihood identities",
    7: "synthetic induction, directional",
    8: "dying activations vs normalized blocks",
    9: "seeded runs are bit-deterministic",
    10: "decoder sanity",
}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(n): test contributes to acceptance criterion n"
    )
    config._acceptance_outcomes = {}


def _criterion_of(item):
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return None
    return int(mark.args[0])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    n = _criterion_of(item)
    if n is None:
        return
    store = item.config._acceptance_outcomes.setdefault(n, [])
    if report.when == "call":
        store.append(report.outcome)
    elif report.when == "setup" and report.outcome in ("failed", "skipped"):
        store.append(report.outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = getattr(config, "_acceptance_outcomes", {})
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERION_NAMES):
        name = CRITERION_NAMES[n]
        got = outcomes.get(n)
        if not got:
            status, color = "NOT RUN", {"yellow": True}
        elif any(o == "failed" for o in got):
            status, color = "FAIL", {"red": True}
        elif all(o == "skipped" for o in got):
            status, color = "NOT RUN", {"yellow": True}
        else:
            status, color = "PASS", {"green": True}
        terminalreporter.write_line(f"CRITERION {n:2d} [{name}]: {status}", **color)
