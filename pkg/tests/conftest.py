import logging

import numpy as np
import pytest

from qalopt.panel import Landmarks, Panel, SubjectTrajectory
from qalopt.simgen import SimConfig, generate_panel

logging.getLogger("qalopt").setLevel(logging.ERROR)


def make_traj(times, q, T, C=np.inf, a=None, z=None, names=("z1",), sid=0):
    """Trajectory with values blanked after exit, as a panel file would hold them."""
    times = np.asarray(times, dtype=float)
    k1 = times.size
    obs = min(T, C)
    y = (obs >= times).astype(np.int8)
    q = np.where(y == 1, np.asarray(q, dtype=float), np.nan)
    a = np.zeros(k1) if a is None else np.asarray(a, dtype=float)
    a = np.where(y == 1, a, np.nan)
    z = np.zeros((k1, len(names))) if z is None else np.asarray(z, dtype=float).reshape(k1, len(names))
    z = np.where(y[:, None] == 1, z, np.nan)
    return SubjectTrajectory(sid, z, a, y, q, float(T), float(C), tuple(names))


def make_panel(trajs, times, names=("z1",)):
    return Panel.from_subjects(trajs, Landmarks(np.asarray(times, dtype=float)), names)


@pytest.fixture(scope="session")
def sim_cfg():
    return SimConfig(scenario=1, K=6, n=400, seed=11)


@pytest.fixture(scope="session")
def sim_panel(sim_cfg):
    return generate_panel(sim_cfg)


@pytest.fixture(scope="session")
def sim2_panel():
    return generate_panel(SimConfig(scenario=2, K=6, n=400, seed=12))


def panel_from_records(times, subjects):
    """Package panel from the plain records used by the scalar oracle."""
    trajs = [make_traj(times, s["q"], s["T"], s["C"], s["a"], s["z"], names=("z1", "z2"), sid=i)
             for i, s in enumerate(subjects)]
    return make_panel(trajs, times, ("z1", "z2"))


def toy_truth(role, panel, subject, stage):
    import oracle

    z1 = panel.covariate("z1")[subject, stage]
    z2 = panel.covariate("z2")[subject, stage]
    return np.array([oracle.toy_hazard(role, a, b, int(j)) for a, b, j in zip(z1, z2, stage)])


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
