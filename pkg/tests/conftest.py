import sys

import numpy as np
import pytest

from riftsim.worldmap import Lane, LaneGraph


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def chain_graph(lengths, width=3.5):
    """Straight lanes laid end to end along +x, each the successor of the previous one."""
    lanes, x = [], 0.0
    for k, L in enumerate(lengths):
        succ = (k + 1,) if k + 1 < len(lengths) else ()
        lanes.append(Lane(k, np.array([[x, 0.0], [x + L, 0.0]]), width, successors=succ))
        x += L
    return LaneGraph(lanes)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.format_line(n))
