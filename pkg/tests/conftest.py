import pytest

from risknet.provisioning import Scenario, Sla
from risknet.reliability import ComponentReliability
from risknet.topology import Link, Topology


def make_topology(n, edges, capacities=None):
    capacities = capacities or {}
    links = tuple(
        Link(i, a, b, 100.0, capacities.get(i, 0.0)) for i, (a, b) in enumerate(edges)
    )
    return Topology(n, links)


def uniform_reliability(n_links, lam=1.0, alpha=2.0, beta=1.0):
    return [ComponentReliability(lam, alpha, beta) for _ in range(n_links)]


# Two SLAs whose backups share link 4 (routers 4-5):
#   SLA 0: 0 -> 1 working [0]        backup [2, 4, 5]
#   SLA 1: 2 -> 3 working [1]        backup [3, 4, 6]
SHARED_EDGES = [(0, 1), (2, 3), (0, 4), (2, 4), (4, 5), (1, 5), (3, 5)]


def shared_scenario(demands=(4.0, 5.0), shared_capacity=5.0, rate=1.0):
    caps = {2: demands[0], 5: demands[0], 3: demands[1], 6: demands[1], 4: shared_capacity}
    topo = make_topology(6, SHARED_EDGES, caps)
    slas = [
        Sla(0, 0, 1, demands[0], (0,), (2, 4, 5)),
        Sla(1, 2, 3, demands[1], (1,), (3, 4, 6)),
    ]
    return Scenario(topo, slas, uniform_reliability(topo.n_links), rate)


@pytest.fixture
def shared():
    return shared_scenario()


# --------------------------------------------------------------------------- acceptance summary

_CRITERIA = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    detail = getattr(item.module, "DETAILS", {}).get(number, "")
    _CRITERIA[number] = (title, call.excinfo is None, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
