"""Objective terms: kernel data term, initial-pose prior, deformation
regulariser, robust losses, IRLS weights and the bandwidth schedule.

The registration *maximises* ``E_data - lambda1 * E_init - lambda2 * E_reg``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import kernels
from .centerline import Centerline3D, CorrespondenceSet
from .errors import DepthBelowMin, EmptyResiduals
from .geometry import RigidTransform, se3_left_jacobian_inv, se3_log
from .problem import Problem


@dataclass(frozen=True)
class Hyperparams:
    ell: float | None = None  # None: initialise from the largest residual
    ell_halving_period: int = 5
    ell_min: float = 1.0
    lambda1: float = 100.0
    lambda2: float = 1.0
    w1: float = 0.1
    w2: float = 10.0
    w3: float = 1.0
    k: int = 2
    huber_delta: float = 5.0
    radius_factor: float = 3.0
    # optional per-component weights on the log-pose prior, (omega, v) order
    init_scale: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.ell_min > 0:
            raise ValueError(f"ell_min must be positive, got {self.ell_min}")
        if self.ell is not None and self.ell < self.ell_min:
            raise ValueError(f"ell={self.ell} is below ell_min={self.ell_min}")
        for name in ("lambda1", "lambda2", "w1", "w2", "w3", "huber_delta", "radius_factor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.k < 1 or self.ell_halving_period < 1:
            raise ValueError("k and ell_halving_period must be >= 1")
        if self.init_scale is not None and len(self.init_scale) != 6:
            raise ValueError("init_scale needs 6 entries")

    def replace(self, **changes) -> "Hyperparams":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class SquaredL2:
    name = "l2"


@dataclass(frozen=True)
class Huber:
    delta: float = 5.0
    name = "huber"


@dataclass(frozen=True)
class ExpKernel:
    ell: float | None = None  # None: follow the bandwidth schedule
    name = "rkhs"


LossKind = SquaredL2 | Huber | ExpKernel


def loss_from_name(name: str, hp: Hyperparams | None = None) -> LossKind:
    hp = hp or Hyperparams()
    key = name.lower()
    if key in ("l2", "squaredl2", "squared_l2"):
        return SquaredL2()
    if key == "huber":
        return Huber(hp.huber_delta)
    if key in ("rkhs", "exp", "expkernel"):
        return ExpKernel()
    raise ValueError(f"unknown loss {name!r}; expected l2, huber or rkhs")


def loss_eval(kind: LossKind, d: float, ell: float | None = None) -> tuple[float, float]:
    """Loss value and derivative with respect to the residual norm ``d``."""
    if d < 0:
        raise ValueError("residual norm must be nonnegative")
    if isinstance(kind, SquaredL2):
        return d * d, 2.0 * d
    if isinstance(kind, Huber):
        delta = kind.delta
        if d <= delta:
            return 0.5 * d * d, d
        return delta * (d - 0.5 * delta), delta
    if isinstance(kind, ExpKernel):
        ell = kind.ell if ell is None else ell
        val = math.exp(-d * d / (2.0 * ell * ell))
        return val, -d / (ell * ell) * val
    raise TypeError(f"unknown loss kind {kind!r}")


def loss_weights(kind: LossKind, d: np.ndarray, ell: float) -> np.ndarray:
    """Per-pair least-squares weights: kernel values, ones, or Huber weights."""
    d = np.asarray(d, dtype=float)
    if isinstance(kind, ExpKernel):
        return irls_weights(d, ell)
    if isinstance(kind, SquaredL2):
        return np.ones_like(d)
    if isinstance(kind, Huber):
        return kind.delta / np.maximum(d, kind.delta)
    raise TypeError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# state


@dataclass(frozen=True, eq=False)
class DeformationField:
    displacements: np.ndarray

    def __post_init__(self):
        r = np.array(self.displacements, dtype=float).reshape(-1, 3)
        r.setflags(write=False)
        object.__setattr__(self, "displacements", r)

    @classmethod
    def zeros(cls, n: int) -> "DeformationField":
        return cls(np.zeros((n, 3)))

    def __len__(self) -> int:
        return self.displacements.shape[0]

    def __add__(self, other: "DeformationField") -> "DeformationField":
        return DeformationField(self.displacements + other.displacements)

    def is_zero(self) -> bool:
        return not np.any(self.displacements)


@dataclass(frozen=True, eq=False)
class State:
    pose: RigidTransform
    field: DeformationField | None = None

    def disp(self) -> np.ndarray | None:
        if self.field is None or self.field.is_zero():
            return None
        return self.field.displacements


def deform(p, i: int, theta: DeformationField) -> np.ndarray:
    if not 0 <= i < len(theta):
        raise IndexError(f"point index {i} out of range for a field of {len(theta)}")
    return np.asarray(p, dtype=float) + theta.displacements[i]


def pair_residuals(problem: Problem, state: State, corr: CorrespondenceSet) -> np.ndarray:
    """Pixel distance of each correspondence pair at ``state``."""
    uv, ok = kernels.project(problem.points, state.disp(), state.pose.rotation, state.pose.translation,
                             problem.cam_array)
    if corr.n_pairs and not np.all(ok[corr.src]):
        raise DepthBelowMin("a matched source point fell below the minimum depth")
    diff = uv[corr.src] - problem.target_points[corr.tgt]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def e_data(problem: Problem, state: State, corr: CorrespondenceSet, hp: Hyperparams,
           ell: float | None = None) -> float:
    ell = hp.ell if ell is None else ell
    d = pair_residuals(problem, state, corr)
    return float(np.sum(np.exp(-d * d / (2.0 * ell * ell))))


def e_init(T: RigidTransform, T0: RigidTransform, scale=None) -> float:
    z = se3_log(T0.inverse() @ T)
    if scale is None:
        return float(z @ z)
    return float(np.sum(np.asarray(scale) * z * z))


def e_init_linearization(T: RigidTransform, T0: RigidTransform) -> tuple[np.ndarray, np.ndarray]:
    """Residual ``log(T0^-1 T)`` and its Jacobian for a left twist on ``T``."""
    T0inv = T0.inverse()
    z = se3_log(T0inv @ T)
    return z, se3_left_jacobian_inv(z) @ T0inv.adjoint()


def e_init_gradient(T: RigidTransform, T0: RigidTransform, scale=None) -> np.ndarray:
    z, J = e_init_linearization(T, T0)
    s = np.ones(6) if scale is None else np.asarray(scale, dtype=float)
    return 2.0 * J.T @ (s * z)


def regularizer_graph(cl: Centerline3D | Problem, hp: Hyperparams) -> sp.csr_matrix:
    """N x N matrix ``G`` with ``E_reg = sum_c r[:, c] . G r[:, c]``.

    Each neighbour double sum runs over ordered pairs, so an undirected edge
    contributes twice: ``G = w1 I + 2 w2 L_chain + 2 w3 L_spatial``.
    """
    if isinstance(cl, Problem):
        Lc, Ls = cl.graph_laplacians
        n = cl.n_points
    else:
        from .problem import _laplacian

        n = len(cl)
        ce, se = cl.edges()
        Lc, Ls = _laplacian(ce, n), _laplacian(se, n)
    return (hp.w1 * sp.identity(n, format="csr") + 2.0 * hp.w2 * Lc + 2.0 * hp.w3 * Ls).tocsr()


def e_reg(theta: DeformationField, cl: Centerline3D | Problem, hp: Hyperparams) -> float:
    r = theta.displacements
    n = cl.n_points if isinstance(cl, Problem) else len(cl)
    if r.shape[0] != n:
        raise ValueError(f"field has {r.shape[0]} displacements for {n} points")
    G = regularizer_graph(cl, hp)
    return float(np.sum(r * (G @ r)))


def e_reg_gradient(theta: DeformationField, cl: Centerline3D | Problem, hp: Hyperparams) -> np.ndarray:
    G = regularizer_graph(cl, hp)
    return 2.0 * (G @ theta.displacements)


def total_objective(problem: Problem, state: State, corr: CorrespondenceSet, hp: Hyperparams,
                    T0: RigidTransform, ell: float | None = None) -> float:
    value = e_data(problem, state, corr, hp, ell)
    if hp.lambda1:
        value -= hp.lambda1 * e_init(state.pose, T0, hp.init_scale)
    if hp.lambda2 and state.field is not None:
        value -= hp.lambda2 * e_reg(state.field, problem, hp)
    return value


def irls_weights(d, ell: float) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    return np.exp(-d * d / (2.0 * ell * ell))


def fixed_weight_cost(problem: Problem, state: State, corr: CorrespondenceSet, weights: np.ndarray,
                      hp: Hyperparams, T0: RigidTransform | None = None, include_reg: bool = False) -> float:
    """The least-squares surrogate minimised by one inner solve."""
    P = state.pose
    cost = kernels.weighted_cost(problem.points, state.disp(), P.rotation, P.translation, problem.cam_array,
                                 corr.indptr, corr.tgt, weights, problem.target_points)
    if T0 is not None and hp.lambda1:
        cost += hp.lambda1 * e_init(P, T0, hp.init_scale)
    if include_reg and hp.lambda2 and state.field is not None:
        cost += hp.lambda2 * e_reg(state.field, problem, hp)
    return cost


def bandwidth_schedule(residuals, iteration: int, hp: Hyperparams, ell: float | None = None) -> float:
    """Kernel bandwidth for an outer iteration.

    At iteration 0 the bandwidth is the largest residual (or ``hp.ell`` when
    fixed); afterwards it halves on every positive multiple of the halving
    period, never dropping below ``ell_min``.
    """
    if iteration == 0 or ell is None:
        if hp.ell is not None:
            return max(hp.ell, hp.ell_min)
        r = np.asarray(residuals, dtype=float)
        r = r[np.isfinite(r)]
        if r.size == 0:
            raise EmptyResiduals("no residuals to initialise the bandwidth")
        return max(float(r.max()), hp.ell_min)
    if iteration > 0 and iteration % hp.ell_halving_period == 0:
        return max(0.5 * ell, hp.ell_min)
    return ell
