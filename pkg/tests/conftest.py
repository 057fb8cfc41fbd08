import numpy as np
import pytest

from stepstone.dynamics import RobotModel, load_quadruped
from stepstone.liegroup import State, config_oplus


@pytest.fixture(scope="session")
def quadruped():
    return load_quadruped()


def pendulum_dict(mass=1.2, length=0.5, axis=(0, -1, 0)):
    """Floating trunk held still + one revolute joint with a point mass
    at distance `length` along +x when the angle is zero."""
    return {
        "name": "pendulum",
        "bodies": [
            {"name": "trunk", "mass": 1.0, "com": [0, 0, 0],
             "inertia": [[0.01, 0, 0], [0, 0.01, 0], [0, 0, 0.01]]},
            {"name": "arm", "mass": mass, "com": [length, 0, 0],
             "inertia": [[1e-4, 0, 0], [0, 1e-4, 0], [0, 0, 1e-4]]},
        ],
        "joints": [
            {"name": "base", "type": "floating", "parent": "world", "child": "trunk"},
            {"name": "pivot", "type": "revolute", "parent": "trunk", "child": "arm",
             "axis": list(axis), "origin": {"xyz": [0, 0, 0], "rpy": [0, 0, 0]}},
        ],
        "end_effectors": [{"body": "arm", "offset": [length, 0, 0]}],
        "limits": {
            "q_lb": [-6.3], "q_ub": [6.3], "v_lb": [-50], "v_ub": [50],
            "tau_lb": [-100], "tau_ub": [100],
        },
    }


@pytest.fixture(scope="session")
def pendulum():
    return RobotModel.from_dict(pendulum_dict())


def random_state(model, rng, angle_scale=0.5):
    """Random valid state within a comfortable interior of the limits."""
    x = model.nominal_state()
    dq = np.zeros(model.n_v)
    dq[0:3] = 0.3 * rng.standard_normal(3)
    dq[3:6] = angle_scale * rng.standard_normal(3)
    dq[6:] = 0.3 * rng.standard_normal(model.n_joints)
    q = config_oplus(x.q, dq)
    v = 0.5 * rng.standard_normal(model.n_v)
    return State(q, v)
