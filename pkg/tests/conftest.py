import functools

import pytest

from ratecoll.collocation import Mesh
from ratecoll.ocp import RateMode, validate
from ratecoll.problems import get_problem
from ratecoll.refine import interpolate
from ratecoll.solver import solve
from ratecoll.transcription import transcribe


@functools.lru_cache(maxsize=None)
def _solved(name, scheme="hs", nodes=100, mode="onmesh", order=4):
    vs = validate(get_problem(name))
    problem = transcribe(vs, Mesh.uniform(scheme, nodes, order), RateMode.parse(mode))
    sol = solve(problem)
    return problem, sol, interpolate(problem, sol)


@pytest.fixture(scope="session")
def solved():
    """``solved(name, scheme, nodes, mode)`` -> (problem, solution, trajectory), cached."""
    return _solved


def pytest_configure(config):
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None and rep.when in ("setup", "call"):
        crit = item.config._criteria
        crit[mark.args] = crit.get(mark.args, True) and not rep.failed


def pytest_terminal_summary(terminalreporter, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), ok in sorted(config._criteria.items()):
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}")
