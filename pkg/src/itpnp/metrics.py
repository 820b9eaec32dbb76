"""Projection residual and pose error."""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .errors import DepthBelowMin, ModeUnavailable
from .geometry import RigidTransform
from .problem import Problem

GROUND_TRUTH = "ground_truth"
NEAREST_POINT = "nearest_point"


def projection_residual(pose: RigidTransform, field, problem: Problem, mode: str = GROUND_TRUTH,
                        subset: np.ndarray | None = None, unit: str = "mm") -> float:
    """RMS pixel residual of all projected source points, in mm by default.

    ``ground_truth`` compares against projections under the true pose;
    ``nearest_point`` uses the distance to the closest target point.
    """
    disp = None if field is None else getattr(field, "displacements", field)
    if disp is not None and not np.any(disp):
        disp = None
    uv, ok = kernels.project(problem.points, disp, pose.rotation, pose.translation, problem.cam_array)
    if subset is not None:
        uv, ok = uv[subset], ok[subset]
    if not np.all(ok):
        raise DepthBelowMin("a source point projects below the minimum depth")
    if mode == GROUND_TRUTH:
        ref = problem.reference_projections()
        if ref is None:
            raise ModeUnavailable("ground-truth residual requested but the problem has no ground truth")
        if subset is not None:
            ref = ref[subset]
        d2 = np.sum((uv - ref) ** 2, axis=1)
    elif mode == NEAREST_POINT:
        d, _ = problem.target.nearest(uv, k=1)
        d2 = np.asarray(d) ** 2
    else:
        raise ValueError(f"unknown residual mode {mode!r}")
    if d2.size == 0:
        return 0.0
    rms_px = math.sqrt(float(np.mean(d2)))
    if unit == "px":
        return rms_px
    return rms_px * problem.target.pixel_spacing


def pose_error(estimate: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    """Rotation error in degrees and translation error in mm."""
    dR = estimate.rotation @ gt.rotation.T
    c = np.clip(0.5 * (np.trace(dR) - 1.0), -1.0, 1.0)
    s = 0.5 * np.linalg.norm([dR[2, 1] - dR[1, 2], dR[0, 2] - dR[2, 0], dR[1, 0] - dR[0, 1]])
    angle = math.degrees(math.atan2(s, c))
    return angle, float(np.linalg.norm(estimate.translation - gt.translation))
