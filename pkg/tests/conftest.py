import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import brentq

sys.path.insert(0, str(Path(__file__).parent))

from rmpwbc.config import load_model  # noqa: E402
from rmpwbc.sim import nominal_state  # noqa: E402


# Filled by the acceptance suite and printed after the test summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def biped():
    return load_model()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_configuration(model, rng, joint_range=1.0):
    q = model.neutral_configuration()
    if model.floating:
        q[0:3] = rng.normal(scale=0.2, size=3)
        quat = rng.normal(size=4)
        q[3:7] = quat / np.linalg.norm(quat)
        q[7:] = rng.uniform(-joint_range, joint_range, size=model.nq - 7)
    else:
        q[:] = rng.uniform(-joint_range, joint_range, size=model.nq)
    return q


def balanced_stance(biped):
    """Nominal stance with the hips flexed until the COM sits over the feet.

    Two point feet cannot resist a moment about the line joining them, so
    static balance needs the COM in the vertical plane through that line.
    """

    def offset(delta):
        q, qd = nominal_state(biped)
        for side in ("l", "r"):
            q[biped.joint_q_index(f"{side}_hip_flex")] += delta
        kin = biped.kinematics(q)
        return kin.com_position()[0] - kin.frame_position("l_foot")[0]

    delta = brentq(offset, -0.3, 0.3, xtol=1e-14)
    q, qd = nominal_state(biped)
    for side in ("l", "r"):
        q[biped.joint_q_index(f"{side}_hip_flex")] += delta
    return q, qd
