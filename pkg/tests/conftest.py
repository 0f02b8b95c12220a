import numpy as np
import pytest

from geosplat360.gaussians import GaussianScene, normalize_quat
from geosplat360.synth import render_gt, roomA


def random_scene(rng, n, depth=(1.5, 4.0), scale=(0.05, 0.3), opacity=(0.2, 0.95)):
    """Gaussians scattered around the origin at the given distance range."""
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    means = d * rng.uniform(*depth, size=(n, 1))
    scales = rng.uniform(*scale, size=(n, 3))
    quats = normalize_quat(rng.normal(size=(n, 4)))
    return GaussianScene(means, scales, quats, rng.uniform(*opacity, size=n), rng.uniform(0, 1, (n, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_room():
    return roomA(64, 32)


@pytest.fixture(scope="session")
def small_views(small_room):
    cams = list(small_room.cameras)
    return cams, [render_gt(small_room, c) for c in cams]


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def report_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
