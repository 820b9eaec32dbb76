"""Robust 3D-2D vessel centerline registration on SE(3).

A 3D centerline is aligned to a 2D centerline by alternating nearest-neighbour
correspondence search with Levenberg-Marquardt solves of a bounded
Gaussian-kernel similarity, first over a rigid pose and then over a smooth
per-point deformation field.
"""

from .centerline import (
    Centerline2D,
    Centerline3D,
    CorrespondenceSet,
    apply_precalibration,
    build_neighbor_sets,
    find_correspondences,
    load_centerline,
    load_centerline2d,
    load_centerline3d,
    save_centerline,
)
from .errors import (
    AngleAtPi,
    DegenerateNormalEquations,
    DepthBelowMin,
    EmptyAfterCrop,
    EmptyCenterline,
    EmptyResiduals,
    GridTooLarge,
    ModeUnavailable,
    NoCorrespondences,
    ParseError,
    RegistrationError,
)
from .geometry import (
    CameraModel,
    RigidTransform,
    project,
    project_points,
    projection_jacobian,
    se3_exp,
    se3_log,
    so3_exp,
    so3_log,
)
from .kernels import BACKEND
from .metrics import pose_error, projection_residual
from .objective import (
    DeformationField,
    ExpKernel,
    Huber,
    Hyperparams,
    SquaredL2,
    State,
    bandwidth_schedule,
    e_data,
    e_init,
    e_reg,
    irls_weights,
    total_objective,
)
from .problem import Problem
from .simbench import (
    DisturbanceSpec,
    brute_force_oracle,
    bundled_tree,
    crop_fov,
    make_vessel_tree,
    run_benchmark,
    sample_disturbance,
    synthesize_case,
)
from .solver import SolveReport, SolverConfig, register, solve_euclidean_baseline, solve_nonrigid, solve_rigid

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
