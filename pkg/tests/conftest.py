import numpy as np
import pytest
from hypothesis import settings

from itpnp.centerline import Centerline2D, Centerline3D
from itpnp.geometry import CameraModel, RigidTransform
from itpnp.problem import Problem
from itpnp.simbench import bundled_tree, synthesize_case

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture(scope="session")
def tree():
    return bundled_tree()


@pytest.fixture(scope="session")
def case(tree):
    """``(problem, target, gt_pose, start)`` on the bundled tree, zero disturbance."""
    return synthesize_case(tree)


def helix(n=60, radius=20.0, pitch=4.0, turns=1.5):
    s = np.linspace(0.0, 2 * np.pi * turns, n)
    return np.column_stack([radius * np.cos(s), radius * np.sin(s), pitch * s])


@pytest.fixture
def small_problem():
    """A 60-point helix seen from 300 mm with its exact projection as target."""
    cl = Centerline3D(helix(), (np.arange(60),))
    cam = CameraModel(800.0, 800.0, 256.0, 256.0)
    gt = RigidTransform(np.eye(3), [0.0, 0.0, 300.0])
    proto = Problem(cl, Centerline2D(np.zeros((1, 2))), cam)
    from itpnp import kernels

    uv, _ = kernels.project(proto.points, None, gt.rotation, gt.translation, proto.cam_array)
    target = Centerline2D(uv, 0.3, (np.arange(60),))
    return Problem(cl, target, cam, gt_pose=gt), gt
