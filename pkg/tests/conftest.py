import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bgch.graph import planted_clusters, split

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def planted_split():
    return split(planted_clusters(20, 20, seed=0), 0.2, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_graph(rng, n1, n2, m):
    from bgch.graph import BipartiteGraph

    xs = rng.integers(0, n1, size=m)
    ys = rng.integers(0, n2, size=m)
    return BipartiteGraph(n1, n2, np.stack([xs, ys], axis=1))


# -- acceptance summary ------------------------------------------------------

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        number = dict(report.user_properties).get("criterion")
        _ACCEPTANCE[report.nodeid] = (number, report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    label = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    for nodeid, (number, outcome, detail) in sorted(_ACCEPTANCE.items(), key=lambda kv: kv[1][0] or 0):
        name = nodeid.split("::")[-1]
        terminalreporter.write_line(f"criterion {number:>2}: {label.get(outcome, outcome)}  {name}  {detail}")
