import sys

import numpy as np
import pytest

from gridest.netmodel import Bus, GridSpec, Line, load_grid


def random_laplacian(rng, n, density=1.0):
    """Complex Laplacian from random edge weights with positive conductance."""
    y = np.zeros((n, n), dtype=complex)
    for i in range(n):
        for k in range(i):
            if density >= 1.0 or rng.random() < density:
                w = rng.uniform(0.1, 2) + 1j * rng.uniform(-5, 5)
                y[i, k] = y[k, i] = -w
    y[np.diag_indices(n)] = -y.sum(axis=1)
    return y


def random_symmetric(rng, n):
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return a + a.T


def random_grid(rng, n, n_gen=1, extra_edges=2):
    """Connected grid: random spanning tree plus a few chords, bus 1 is the slack."""
    edges = set()
    for k in range(2, n + 1):
        edges.add((int(rng.integers(1, k)), k))
    for _ in range(extra_edges):
        i, k = sorted(rng.choice(np.arange(1, n + 1), 2, replace=False))
        edges.add((int(i), int(k)))
    lines = [Line(i, k, complex(rng.uniform(2, 6), -rng.uniform(6, 15))) for i, k in sorted(edges)]
    buses = [Bus(1, "slack", v_set=1.0)]
    for b in range(2, n + 1):
        if b <= 1 + n_gen:
            buses.append(Bus(b, "generator", v_set=1.0, p_set=0.02))
        else:
            p = rng.uniform(0.01, 0.05)
            buses.append(Bus(b, "load", demand=complex(p, 0.4 * p)))
    return GridSpec(buses, lines, name=f"random{n}")


@pytest.fixture(scope="session")
def grid_d():
    return load_grid("grid_d")


@pytest.fixture(scope="session")
def grid_t():
    return load_grid("grid_t")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    report = getattr(module, "REPORT", None)
    if report:
        terminalreporter.section("acceptance criteria")
        for number in sorted(report):
            terminalreporter.write_line(report[number])
