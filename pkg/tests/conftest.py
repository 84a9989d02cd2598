import os
import sys
from collections import OrderedDict

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from gepp.model import PAPER_PARAMS  # noqa: E402
from gepp.pipeline import analyze  # noqa: E402
from gepp.solver import build_grid, solve_policy_iteration, solve_value_iteration  # noqa: E402
from oracles import ChainOracle  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): acceptance criterion covered by a test")
    config._criteria = OrderedDict()


@pytest.fixture(scope="session")
def paper_analysis():
    return analyze(PAPER_PARAMS)


@pytest.fixture(scope="session")
def paper_values(paper_analysis):
    return paper_analysis.pi


@pytest.fixture(scope="session")
def paper_oracle():
    return ChainOracle(PAPER_PARAMS)


@pytest.fixture(scope="session")
def small_grid():
    return build_grid(PAPER_PARAMS, 32)


@pytest.fixture(scope="session")
def small_vi(small_grid):
    return solve_value_iteration(small_grid)


@pytest.fixture(scope="session")
def small_pi(small_grid):
    return solve_policy_iteration(small_grid)


# -- acceptance summary: one line per criterion ------------------------------

@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    crit = item.config._criteria
    cid, title = mark.args
    entry = crit.setdefault(cid, {"title": title, "passed": 0, "failed": [], "skipped": 0})
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        if rep.outcome == "passed":
            entry["passed"] += 1
        elif rep.outcome == "skipped":
            entry["skipped"] += 1
        else:
            entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    crit = config._criteria
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for cid, e in crit.items():
        ok = not e["failed"] and e["passed"] > 0
        n = e["passed"] + len(e["failed"])
        extra = f", {e['skipped']} not applicable" if e["skipped"] else ""
        line = f"criterion {cid:<3} {'PASS' if ok else 'FAIL'}  {e['title']}  ({e['passed']}/{n} checks passed{extra})"
        terminalreporter.write_line(line)
        for name in e["failed"]:
            terminalreporter.write_line(f"    failed: {name}")
