import numpy as np
import pytest

from spraygnn import autodiff as ad
from spraygnn.geometry import TrajectoryStep, WallGrid
from spraygnn.graph import NormStats, VelocityHistory, build_graph


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` with respect to array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def tiny_graph(nx=4, ny=4, spacing=10.0, seed=0, offsets=None):
    """Small wall with the gun above its middle; every particle within reach of the cone."""
    rng = np.random.default_rng(seed)
    grid = WallGrid(nx, ny, spacing)
    if offsets is None:
        offsets = rng.uniform(0, 2, grid.n)
    center = grid.inplane.mean(axis=0)
    step = TrajectoryStep(0, np.array([center[0], center[1], 60.0]), np.array([0.4, 0.1, 0.0]),
                          np.array([0.0, 0.0, -1.0]), 2.0)
    hist = VelocityHistory()
    hist.push([0.3, 0.0, 0.0])
    hist.push(step.u)
    stats = NormStats([float(center[0]), float(center[1]), 0.0], 20.0, 2.0, 0.5)
    return grid, step, stats, build_graph(grid, offsets, step, hist, 1, 4, stats, R_wall=15.0, cone_factor=0.4)


@pytest.fixture
def fd():
    return central_difference


@pytest.fixture
def relerr():
    return rel_error


def record(fn):
    with ad.Tape() as tape:
        out = fn()
    return tape, out


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
