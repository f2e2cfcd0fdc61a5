"""Shared fixtures: reference scenes and small render configurations."""

import numpy as np
import pytest

from beamrir.beams import BeamConfig
from beamrir.data import ShoeboxSpec
from beamrir.dsp import default_grid
from beamrir.geometry import shoebox_geometry


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def box_spec():
    return ShoeboxSpec(dimensions=(4.0, 5.0, 3.0),
                       reflection=np.full(6, 0.7), max_order=2)


@pytest.fixture(scope="session")
def box_geom(box_spec):
    return box_spec.geometry()


@pytest.fixture(scope="session")
def grid16():
    # 16 log-spaced key frequencies, 16 kHz, 4096-point kernels
    return default_grid(16000, 4096, 16)


@pytest.fixture(scope="session")
def small_grid():
    return default_grid(16000, 1024, 16)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def beam_cfg():
    return BeamConfig(n_beams=16384, max_depth=2)


def brute_force_hit(geom, origin, direction, t_min=1e-6):
    """Reference nearest-hit: exhaustive Moller-Trumbore over every face."""
    origin = np.asarray(origin, float)
    direction = np.asarray(direction, float)
    best = (np.inf, -1)
    for f in range(geom.n_faces):
        v0 = geom._v0[f]
        e1 = geom._e1[f]
        e2 = geom._e2[f]
        p = np.cross(direction, e2)
        det = e1 @ p
        if abs(det) < 1e-12:
            continue
        tv = origin - v0
        u = (tv @ p) / det
        q = np.cross(tv, e1)
        v = (direction @ q) / det
        t = (e2 @ q) / det
        if u >= -1e-9 and v >= -1e-9 and u + v <= 1 + 1e-9 and t > t_min:
            if t < best[0]:
                best = (t, f)
    return best
