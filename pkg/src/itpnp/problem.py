"""A registration problem: source, target, camera and cached derived data."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .centerline import Centerline2D, Centerline3D, apply_precalibration
from .geometry import CameraModel, RigidTransform


@dataclass(eq=False)
class Problem:
    source: Centerline3D
    target: Centerline2D
    camera: CameraModel
    centering: str = "after"
    gt_pose: RigidTransform | None = None
    gt_field: np.ndarray | None = None
    # reference pixels for ground-truth scoring; defaults to projecting under gt_pose
    gt_projections: np.ndarray | None = field(default=None, repr=False)

    @cached_property
    def points(self) -> np.ndarray:
        """Precalibrated, centred source points, computed once per problem."""
        pts = np.ascontiguousarray(apply_precalibration(self.source, self.centering))
        pts.setflags(write=False)
        return pts

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @cached_property
    def cam_array(self) -> np.ndarray:
        return self.camera.as_array()

    @cached_property
    def target_points(self) -> np.ndarray:
        return np.ascontiguousarray(self.target.points)

    @cached_property
    def graph_laplacians(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """(chain, spatial) graph Laplacians over source points, N x N."""
        n = self.n_points
        chain, spatial = self.source.edges()
        return _laplacian(chain, n), _laplacian(spatial, n)

    def reference_projections(self) -> np.ndarray | None:
        if self.gt_projections is not None:
            return self.gt_projections
        if self.gt_pose is None:
            return None
        from .kernels import project

        uv, _ = project(self.points, self.gt_field, self.gt_pose.rotation, self.gt_pose.translation,
                        self.cam_array)
        return uv

    def with_target(self, target: Centerline2D) -> "Problem":
        return Problem(self.source, target, self.camera, self.centering, self.gt_pose, self.gt_field,
                       self.gt_projections)


def _laplacian(edges: np.ndarray, n: int) -> sp.csr_matrix:
    if edges.shape[0] == 0:
        return sp.csr_matrix((n, n))
    i, j = edges[:, 0], edges[:, 1]
    ones = np.ones(i.shape[0])
    A = sp.coo_matrix((np.r_[ones, ones], (np.r_[i, j], np.r_[j, i])), shape=(n, n)).tocsr()
    deg = np.asarray(A.sum(axis=1)).ravel()
    return (sp.diags(deg) - A).tocsr()
