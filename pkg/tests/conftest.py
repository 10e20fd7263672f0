import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gridrepl.network import CenterNode, Link, Network  # noqa: E402
from gridrepl.scenario import default_topology  # noqa: E402

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = ("PASS" if ok else "FAIL", detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{status}] criterion {n:2d}: {detail}")


@pytest.fixture
def paper_net():
    from gridrepl.network import build_network

    return build_network(default_topology(), window_bytes=8e6)


def line_network(capacities, rtts=None, window=8e6, limit=float("inf")):
    """Chain N0 - N1 - ... with the given per-link capacities (B/s)."""
    rtts = rtts or [0.0] * len(capacities)
    nodes = [CenterNode(f"N{i}", max_concurrent_outbound=limit) for i in range(len(capacities) + 1)]
    links = [Link(f"L{i}", (f"N{i}", f"N{i + 1}"), c, r) for i, (c, r) in enumerate(zip(capacities, rtts))]
    return Network(nodes, links, window_bytes=window)
