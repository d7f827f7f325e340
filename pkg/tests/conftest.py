import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gap_nrl.graph import Graph


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_graph(n, p, seed, directed=False):
    r = np.random.default_rng(seed)
    pairs = [(u, v) for u in range(n) for v in range(n) if u != v and (directed or u < v)]
    edges = [e for e in pairs if r.random() < p]
    return Graph.from_edges(n, edges, directed)


def two_cliques(k=5):
    edges = [(u, v) for u in range(k) for v in range(u + 1, k)]
    edges += [(u + k, v + k) for u in range(k) for v in range(u + 1, k)]
    edges.append((0, k))
    return Graph.from_edges(2 * k, edges, directed=False)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, status, text):
    line = f"criterion {number:>2}  {status:<7}  {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
