import sys
import numpy as np
import pytest

from biharmlab.graph_domain import GraphDomain, build_mesh


@pytest.fixture(scope="session")
def flat3():
    return build_mesh(GraphDomain(3, "flat", 0.0, 1.0), 0.2, 8.0, core_radius=3.0)


@pytest.fixture(scope="session")
def bump3():
    return build_mesh(GraphDomain(3, "bump", 0.5, 1.0), 0.2, 16.0, core_radius=2.0)


@pytest.fixture(scope="session")
def bump4():
    return build_mesh(GraphDomain(4, "bump", 0.3, 1.0), 0.5, 8.0, core_radius=1.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
