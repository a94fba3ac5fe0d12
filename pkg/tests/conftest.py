import numpy as np
import pytest

from beltfield.graph import from_adjacency_list
from beltfield.panel import panel_from_arrays

ACCEPTANCE_LINES = []


def grid_graph(nrow, ncol, queen=False):
    pairs = []
    idx = lambda r, c: r * ncol + c
    for r in range(nrow):
        for c in range(ncol):
            if c + 1 < ncol:
                pairs.append((idx(r, c), idx(r, c + 1)))
            if r + 1 < nrow:
                pairs.append((idx(r, c), idx(r + 1, c)))
            if queen and r + 1 < nrow:
                if c + 1 < ncol:
                    pairs.append((idx(r, c), idx(r + 1, c + 1)))
                if c > 0:
                    pairs.append((idx(r, c), idx(r + 1, c - 1)))
    ids = tuple(f"r{k:02d}" for k in range(nrow * ncol))
    return from_adjacency_list(nrow * ncol, pairs, ids)


@pytest.fixture
def grid3():
    return grid_graph(3, 3)


@pytest.fixture
def small_panel(grid3):
    rng = np.random.default_rng(5)
    R, T = grid3.n_regions, 6
    x = rng.normal(size=(R, 1))
    rate = 1 / (1 + np.exp(-(0.3 + 0.5 * x + rng.normal(scale=0.2, size=(R, T)))))
    counts = np.full((R, T), 200)
    return panel_from_arrays(rate, counts, x, region_ids=grid3.region_ids, covariate_names=["x"])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
