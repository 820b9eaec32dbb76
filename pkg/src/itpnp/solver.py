"""Iterative PnP: correspondence refresh + IRLS reweighting + bandwidth
annealing around Levenberg-Marquardt inner solves.

The rigid stage optimises a left twist on SE(3); the nonrigid stage
optimises per-point displacements with the pose frozen (or jointly with the
pose when ``SolverConfig.joint`` is set).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import kernels
from .centerline import CorrespondenceSet, find_correspondences
from .errors import AngleAtPi, DegenerateNormalEquations, NoCorrespondences
from .geometry import RigidTransform, se3_exp, se3_left_jacobian_inv, se3_log
from .metrics import GROUND_TRUTH, NEAREST_POINT, projection_residual
from .objective import (
    DeformationField,
    ExpKernel,
    Huber,
    Hyperparams,
    LossKind,
    SquaredL2,
    bandwidth_schedule,
    e_init,
    e_init_linearization,
    loss_weights,
    regularizer_graph,
)
from .problem import Problem

RIGID = "rigid"
RIGID_THEN_NONRIGID = "rigid_then_nonrigid"
MU_MIN, MU_MAX = 1e-12, 1e12
LINEAR_SOLVERS = ("cholesky", "cg")


@dataclass(frozen=True)
class SolverConfig:
    max_outer: int = 50
    max_inner: int = 10
    step_tol: float = 1e-3
    objective_tol: float = 1e-8
    lm_lambda_init: float = 1e-3
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 0.1
    loss: LossKind = field(default_factory=ExpKernel)
    stage: str = RIGID
    joint: bool = False
    max_outer_nonrigid: int | None = None
    linear_solver: str = "cholesky"
    # keep the nonrigid field only if it does not worsen the nearest-point residual
    nonrigid_guard: bool = True
    cg_tol: float = 1e-10
    cg_maxiter: int = 2000

    def __post_init__(self):
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.max_outer_nonrigid is not None and self.max_outer_nonrigid < 1:
            raise ValueError("max_outer_nonrigid must be >= 1")
        if not (0 < self.lm_lambda_down < 1 < self.lm_lambda_up):
            raise ValueError("LM factors must satisfy 0 < down < 1 < up")
        if self.stage not in (RIGID, RIGID_THEN_NONRIGID):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.linear_solver not in LINEAR_SOLVERS:
            raise ValueError(f"linear_solver must be one of {LINEAR_SOLVERS}, got {self.linear_solver!r}")

    def replace(self, **changes) -> "SolverConfig":
        return replace(self, **changes)


@dataclass
class SolveReport:
    outer_iterations: int = 0
    objective_trace: list[float] = field(default_factory=list)
    final_pose: RigidTransform = field(default_factory=RigidTransform.identity)
    final_field: DeformationField | None = None
    pr_mm: float = float("nan")
    pr_mode: str = ""
    converged: bool = False
    stage_timings: dict[str, float] = field(default_factory=dict)
    stage: str = RIGID
    loss: str = "rkhs"
    stage_outer_iterations: dict[str, int] = field(default_factory=dict)
    ell_trace: list[float] = field(default_factory=list)
    inner_iterations: int = 0
    # (cost before, cost after) of every accepted inner LM step, fixed weights
    accepted_steps: list[tuple[float, float]] = field(default_factory=list)
    rejected_steps: int = 0
    damping_range: tuple[float, float] = (float("inf"), 0.0)
    final_ell: float = float("nan")
    stage_pr_mm: dict[str, float] = field(default_factory=dict)
    nonrigid_reverted: bool = False

    @property
    def monotonicity_violations(self) -> int:
        return sum(1 for before, after in self.accepted_steps if not after < before)

    def merge(self, other: "SolveReport", name: str) -> None:
        self.outer_iterations += other.outer_iterations
        self.objective_trace.extend(other.objective_trace)
        self.ell_trace.extend(other.ell_trace)
        self.inner_iterations += other.inner_iterations
        self.accepted_steps.extend(other.accepted_steps)
        self.rejected_steps += other.rejected_steps
        self.damping_range = (min(self.damping_range[0], other.damping_range[0]),
                              max(self.damping_range[1], other.damping_range[1]))
        self.stage_outer_iterations[name] = other.outer_iterations
        self.stage_timings.update(other.stage_timings)

    def to_dict(self) -> dict:
        f = self.final_field
        return {
            "stage": self.stage,
            "loss": self.loss,
            "outer_iterations": self.outer_iterations,
            "stage_outer_iterations": dict(self.stage_outer_iterations),
            "inner_iterations": self.inner_iterations,
            "objective_trace": [float(v) for v in self.objective_trace],
            "ell_trace": [float(v) for v in self.ell_trace],
            "final_ell": float(self.final_ell),
            "final_pose": self.final_pose.as_matrix().reshape(-1).tolist(),
            "final_field": None if f is None else f.displacements.tolist(),
            "pr_mm": float(self.pr_mm),
            "pr_mode": self.pr_mode,
            "converged": bool(self.converged),
            "stage_timings_ms": {k: float(v) for k, v in self.stage_timings.items()},
            "accepted_steps": len(self.accepted_steps),
            "rejected_steps": self.rejected_steps,
            "monotonicity_violations": self.monotonicity_violations,
            "stage_pr_mm": {k: float(v) for k, v in self.stage_pr_mm.items()},
            "nonrigid_reverted": self.nonrigid_reverted,
        }


def _loss_name(kind: LossKind) -> str:
    return getattr(kind, "name", type(kind).__name__)


def _robust_value(kind: LossKind, d: np.ndarray, ell: float) -> float:
    """Data objective to maximise, reported in the trace."""
    if isinstance(kind, ExpKernel):
        return float(np.sum(np.exp(-d * d / (2.0 * ell * ell))))
    if isinstance(kind, SquaredL2):
        return -float(np.sum(d * d))
    if isinstance(kind, Huber):
        dl = kind.delta
        return -float(np.sum(np.where(d <= dl, 0.5 * d * d, dl * (d - 0.5 * dl))))
    raise TypeError(f"unknown loss kind {kind!r}")


def _score(problem: Problem, pose: RigidTransform, fld) -> tuple[float, str]:
    mode = GROUND_TRUTH if problem.reference_projections() is not None else NEAREST_POINT
    try:
        return projection_residual(pose, fld, problem, mode), mode
    except ValueError:
        return float("nan"), mode


class _Damping:
    def __init__(self, cfg: SolverConfig, report: SolveReport):
        self.mu = cfg.lm_lambda_init
        self.cfg = cfg
        self.report = report
        self._note()

    def _note(self):
        lo, hi = self.report.damping_range
        self.report.damping_range = (min(lo, self.mu), max(hi, self.mu))

    def accept(self):
        self.mu = max(self.mu * self.cfg.lm_lambda_down, MU_MIN)
        self._note()

    def reject(self) -> bool:
        """Raise damping; False once it is saturated."""
        if self.mu >= MU_MAX:
            return False
        self.mu = min(self.mu * self.cfg.lm_lambda_up, MU_MAX)
        self._note()
        return True


def _marquardt_diag(diag: np.ndarray) -> np.ndarray:
    top = float(np.max(diag)) if diag.size else 0.0
    return np.maximum(diag, max(top, 1.0) * 1e-12)


# ---------------------------------------------------------------------------
# inner solves


class _PoseInner:
    """LM over a left twist for ``sum w d^2 + lambda1 E_init``."""

    def __init__(self, problem: Problem, hp: Hyperparams, cfg: SolverConfig, T0: RigidTransform,
                 report: SolveReport):
        self.p, self.hp, self.cfg, self.T0, self.report = problem, hp, cfg, T0, report
        self.scale = np.ones(6) if hp.init_scale is None else np.asarray(hp.init_scale, dtype=float)
        self.T0inv = T0.inverse()
        self.Ad0inv = self.T0inv.adjoint()
        # damping persists across outer iterations so later solves start near Gauss-Newton
        self.damp = _Damping(cfg, report)

    def cost(self, T: RigidTransform, corr: CorrespondenceSet, w: np.ndarray) -> float:
        p = self.p
        c = kernels.weighted_cost(p.points, None, T.rotation, T.translation, p.cam_array,
                                  corr.indptr, corr.tgt, w, p.target_points)
        if self.hp.lambda1 and math.isfinite(c):
            try:
                z = se3_log(self.T0inv @ T)
            except AngleAtPi:
                return math.inf
            c += self.hp.lambda1 * float(np.dot(self.scale * z, z))
        return c

    def run(self, T: RigidTransform, corr: CorrespondenceSet, w: np.ndarray) -> RigidTransform:
        p, hp, cfg, rep = self.p, self.hp, self.cfg, self.report
        damp = self.damp
        cost = self.cost(T, corr, w)
        it = 0
        while it < cfg.max_inner:
            acc = kernels.accumulate(p.points, None, T.rotation, T.translation, p.cam_array,
                                     corr.indptr, corr.tgt, w, p.target_points, False)
            _, H, g, _, _, _ = acc
            if hp.lambda1:
                z = se3_log(self.T0inv @ T)
                J = se3_left_jacobian_inv(z) @ self.Ad0inv
                JS = J.T * self.scale
                H = H + hp.lambda1 * (JS @ J)
                g = g + hp.lambda1 * (JS @ z)
            D = _marquardt_diag(np.diag(H).copy())
            if not np.any(np.diag(H) > 0):
                raise DegenerateNormalEquations("pose normal equations are identically zero")
            accepted = False
            while it < cfg.max_inner:
                it += 1
                try:
                    delta = np.linalg.solve(H + damp.mu * np.diag(D), -g)
                except np.linalg.LinAlgError:
                    delta = None
                if delta is None or not np.all(np.isfinite(delta)):
                    if not damp.reject():
                        raise DegenerateNormalEquations("6x6 system singular at maximum damping")
                    continue
                T_new = se3_exp(delta) @ T
                new_cost = self.cost(T_new, corr, w)
                if new_cost < cost:
                    rep.accepted_steps.append((cost, new_cost))
                    damp.accept()
                    rel = (cost - new_cost) / max(abs(cost), 1e-300)
                    T, cost = T_new, new_cost
                    accepted = True
                    break
                rep.rejected_steps += 1
                if not damp.reject():
                    break
            if not accepted:
                break
            if np.linalg.norm(delta) < cfg.step_tol or rel < cfg.objective_tol:
                break
        rep.inner_iterations += it
        return T


class _FieldSystem:
    """The 3N x 3N displacement normal equations in a fixed sparsity pattern.

    Diagonal 3x3 blocks carry the data term, damping and the regulariser
    diagonal; off-diagonal blocks are ``lambda2 * G_ij * I``. Nodes are
    reordered once (reverse Cuthill-McKee) to keep the factor sparse.
    """

    def __init__(self, G: sp.csr_matrix, lam2: float, backend: str | None = None):
        n = G.shape[0]
        order = reverse_cuthill_mckee(G.tocsr(), symmetric_mode=True).astype(np.int64)
        inv = np.empty(n, dtype=np.int64)
        inv[order] = np.arange(n)
        coo = G.tocoo()
        off = coo.row != coo.col
        gi, gj = coo.row[off].astype(np.int64), coo.col[off].astype(np.int64)
        three = np.arange(3)
        node = np.repeat(np.arange(n), 9)
        rows = [3 * inv[node] + np.tile(np.repeat(three, 3), n), 3 * inv[np.repeat(gi, 3)] + np.tile(three, gi.size)]
        cols = [3 * inv[node] + np.tile(three, 3 * n), 3 * inv[np.repeat(gj, 3)] + np.tile(three, gi.size)]
        slots = np.arange(9 * n + 3 * gi.size, dtype=float) + 1.0
        M = sp.csc_matrix((slots, (np.concatenate(rows), np.concatenate(cols))), shape=(3 * n, 3 * n))
        M.sort_indices()
        self.src = M.data.astype(np.int64) - 1
        self.offdiag = lam2 * np.repeat(coo.data[off], 3)
        self.perm = (3 * order[:, None] + three).ravel()
        self.chol = kernels.sparse_cholesky(M.indptr, M.indices, 3 * n, backend)

    def factor(self, blocks: np.ndarray) -> bool:
        values = np.concatenate([blocks.ravel(), self.offdiag])
        return self.chol.factor(values[self.src])

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        out = np.empty_like(rhs)
        out[self.perm] = self.chol.solve(rhs[self.perm])
        return out


class _FieldInner:
    """LM over displacements (optionally with the pose) for
    ``sum w d^2 + lambda2 E_reg (+ lambda1 E_init when joint)``."""

    def __init__(self, problem: Problem, hp: Hyperparams, cfg: SolverConfig, T0: RigidTransform,
                 report: SolveReport):
        self.p, self.hp, self.cfg, self.T0, self.report = problem, hp, cfg, T0, report
        self.G = regularizer_graph(problem, hp)
        self.Gdiag = self.G.diagonal()
        self.scale = np.ones(6) if hp.init_scale is None else np.asarray(hp.init_scale, dtype=float)
        self.cg_iterations = 0
        self.damp = _Damping(cfg, report)
        self.system = _FieldSystem(self.G, hp.lambda2) if cfg.linear_solver == "cholesky" else None

    def cost(self, T: RigidTransform, r: np.ndarray, corr: CorrespondenceSet, w: np.ndarray) -> float:
        p, hp = self.p, self.hp
        c = kernels.weighted_cost(p.points, r, T.rotation, T.translation, p.cam_array,
                                  corr.indptr, corr.tgt, w, p.target_points)
        if not math.isfinite(c):
            return c
        if hp.lambda2:
            c += hp.lambda2 * float(np.sum(r * (self.G @ r)))
        if self.cfg.joint and hp.lambda1:
            try:
                c += hp.lambda1 * e_init(T, self.T0, self.scale)
            except AngleAtPi:
                return math.inf
        return c

    def _solve(self, Hpp, rhs_r, mu, Dr, H6=None, Hxp=None, rhs_x=None, D6=None):
        if self.system is not None:
            return self._solve_direct(Hpp, rhs_r, mu, Dr, H6, Hxp, rhs_x, D6)
        return self._solve_cg(Hpp, rhs_r, mu, Dr, H6, Hxp, rhs_x, D6)

    def _solve_direct(self, Hpp, rhs_r, mu, Dr, H6, Hxp, rhs_x, D6):
        n = Hpp.shape[0]
        diag = self.hp.lambda2 * self.Gdiag[:, None] + mu * Dr
        blocks = Hpp.copy()
        blocks[:, [0, 1, 2], [0, 1, 2]] += diag
        if not self.system.factor(blocks):
            return None
        if H6 is None:
            return None, self.system.solve(rhs_r.ravel()).reshape(n, 3)
        # eliminate the displacements, solve the 6x6 Schur complement for the twist
        B = Hxp.transpose(0, 2, 1).reshape(3 * n, 6)
        Y = self.system.solve(np.column_stack([B, rhs_r.ravel()]))
        S = H6 + mu * np.diag(D6) - B.T @ Y[:, :6]
        try:
            dx = np.linalg.solve(S, rhs_x - B.T @ Y[:, 6])
        except np.linalg.LinAlgError:
            return None
        return dx, (Y[:, 6] - Y[:, :6] @ dx).reshape(n, 3)

    def _solve_cg(self, Hpp, rhs_r, mu, Dr, H6, Hxp, rhs_x, D6):
        n = Hpp.shape[0]
        lam2 = self.hp.lambda2
        G = self.G
        block = Hpp + (lam2 * self.Gdiag)[:, None, None] * np.eye(3) + mu * Dr[:, :, None] * np.eye(3)
        block_inv = np.linalg.inv(block)
        joint = H6 is not None
        if joint:
            A6 = H6 + mu * np.diag(D6)
            A6_inv = np.linalg.inv(A6)

        def matvec(v):
            v = np.asarray(v).ravel()
            if joint:
                x, r = v[:6], v[6:].reshape(n, 3)
            else:
                r = v.reshape(n, 3)
            out = np.einsum("nij,nj->ni", Hpp, r) + mu * Dr * r
            if lam2:
                out += lam2 * (G @ r)
            if not joint:
                return out.ravel()
            out += np.einsum("nai,a->ni", Hxp, x)
            top = A6 @ x + np.einsum("nai,ni->a", Hxp, r)
            return np.concatenate([top, out.ravel()])

        def precond(v):
            v = np.asarray(v).ravel()
            if joint:
                top = A6_inv @ v[:6]
                rest = np.einsum("nij,nj->ni", block_inv, v[6:].reshape(n, 3)).ravel()
                return np.concatenate([top, rest])
            return np.einsum("nij,nj->ni", block_inv, v.reshape(n, 3)).ravel()

        size = 3 * n + (6 if joint else 0)
        A = spla.LinearOperator((size, size), matvec=matvec, dtype=float)
        M = spla.LinearOperator((size, size), matvec=precond, dtype=float)
        b = rhs_r.ravel() if not joint else np.concatenate([rhs_x, rhs_r.ravel()])
        count = [0]

        def cb(_):
            count[0] += 1

        sol, info = spla.cg(A, b, rtol=self.cfg.cg_tol, atol=0.0, maxiter=self.cfg.cg_maxiter, M=M,
                            callback=cb)
        self.cg_iterations += count[0]
        if not np.all(np.isfinite(sol)):
            return None
        if joint:
            return sol[:6], sol[6:].reshape(n, 3)
        return None, sol.reshape(n, 3)

    def run(self, T: RigidTransform, r: np.ndarray, corr: CorrespondenceSet, w: np.ndarray):
        p, hp, cfg, rep = self.p, self.hp, self.cfg, self.report
        joint = cfg.joint
        damp = self.damp
        cost = self.cost(T, r, corr, w)
        it = 0
        while it < cfg.max_inner:
            _, H6, g6, Hpp, Hxp, gp = kernels.accumulate(
                p.points, r, T.rotation, T.translation, p.cam_array, corr.indptr, corr.tgt, w,
                p.target_points, True)
            grad_r = gp + (hp.lambda2 * (self.G @ r) if hp.lambda2 else 0.0)
            Dr = _marquardt_diag(np.einsum("nii->ni", Hpp) + hp.lambda2 * self.Gdiag[:, None])
            if joint:
                if hp.lambda1:
                    z, J = e_init_linearization(T, self.T0)
                    JS = J.T * self.scale
                    H6 = H6 + hp.lambda1 * (JS @ J)
                    g6 = g6 + hp.lambda1 * (JS @ z)
                D6 = _marquardt_diag(np.diag(H6).copy())
            accepted = False
            while it < cfg.max_inner:
                it += 1
                if joint:
                    sol = self._solve(Hpp, -grad_r, damp.mu, Dr, H6, Hxp, -g6, D6)
                else:
                    sol = self._solve(Hpp, -grad_r, damp.mu, Dr)
                if sol is None:
                    if not damp.reject():
                        raise DegenerateNormalEquations("displacement system singular at maximum damping")
                    continue
                dx, dr = sol
                T_new = se3_exp(dx) @ T if joint else T
                r_new = r + dr
                new_cost = self.cost(T_new, r_new, corr, w)
                if new_cost < cost:
                    rep.accepted_steps.append((cost, new_cost))
                    damp.accept()
                    rel = (cost - new_cost) / max(abs(cost), 1e-300)
                    step = float(np.max(np.linalg.norm(dr, axis=1)))
                    if joint:
                        step = max(step, float(np.linalg.norm(dx)))
                    T, r, cost = T_new, r_new, new_cost
                    accepted = True
                    break
                rep.rejected_steps += 1
                if not damp.reject():
                    break
            if not accepted:
                break
            if step < cfg.step_tol or rel < cfg.objective_tol:
                break
        rep.inner_iterations += it
        return T, r


# ---------------------------------------------------------------------------
# outer loop


def _outer_loop(problem: Problem, T: RigidTransform, r: np.ndarray | None, T0: RigidTransform,
                hp: Hyperparams, cfg: SolverConfig, report: SolveReport, max_outer: int,
                ell: float | None, nonrigid: bool):
    loss = cfg.loss
    is_kernel = isinstance(loss, ExpKernel)
    fixed_ell = is_kernel and loss.ell is not None
    if fixed_ell:
        ell = loss.ell
    inner = _FieldInner(problem, hp, cfg, T0, report) if nonrigid else _PoseInner(problem, hp, cfg, T0, report)
    prev_value = None
    converged = False
    n = 0
    for n in range(max_outer):
        uv, ok = kernels.project(problem.points, r, T.rotation, T.translation, problem.cam_array)
        if ell is None:
            corr = find_correspondences(uv, problem.target, hp.k, np.inf, valid=ok)
            if corr.n_pairs:
                ell = bandwidth_schedule(corr.dist, 0, hp)
        else:
            if n > 0 and not fixed_ell:
                ell = bandwidth_schedule(None, n, hp, ell)
            radius = hp.radius_factor * ell if is_kernel else np.inf
            corr = find_correspondences(uv, problem.target, hp.k, radius, valid=ok)
        if corr.n_pairs == 0:
            raise NoCorrespondences(f"no correspondences at outer iteration {n}")
        report.ell_trace.append(ell)
        w = loss_weights(loss, corr.dist, ell)
        if nonrigid:
            T_new, r_new = inner.run(T, r, corr, w)
            step = float(np.max(np.linalg.norm(r_new - r, axis=1))) if r_new.size else 0.0
            if cfg.joint:
                step = max(step, float(np.linalg.norm(se3_log(T_new @ T.inverse()))))
            T, r = T_new, r_new
        else:
            T_new = inner.run(T, corr, w)
            step = float(np.linalg.norm(se3_log(T_new @ T.inverse())))
            T = T_new
        # trace the robust objective at the new state, same correspondences
        uv, _ = kernels.project(problem.points, r, T.rotation, T.translation, problem.cam_array)
        diff = uv[corr.src] - problem.target_points[corr.tgt]
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        value = _robust_value(loss, d, ell)
        if hp.lambda1 and (cfg.joint or not nonrigid):
            value -= hp.lambda1 * e_init(T, T0, hp.init_scale)
        if nonrigid and hp.lambda2:
            value -= hp.lambda2 * float(np.sum(r * (inner.G @ r)))
        report.objective_trace.append(value)
        annealed = (not is_kernel) or fixed_ell or ell <= hp.ell_min
        small_change = prev_value is not None and abs(value - prev_value) <= cfg.objective_tol * max(abs(value), 1e-300)
        prev_value = value
        if annealed and (step < cfg.step_tol or small_change):
            converged = True
            break
    report.outer_iterations += n + 1
    report.final_ell = ell
    return T, r, converged


def solve_rigid(problem: Problem, T_init: RigidTransform, hp: Hyperparams | None = None,
                cfg: SolverConfig | None = None, T0: RigidTransform | None = None):
    """Rigid stage. Returns ``(pose, report)``."""
    hp = hp or Hyperparams()
    cfg = cfg or SolverConfig()
    T0 = T_init if T0 is None else T0
    report = SolveReport(stage=RIGID, loss=_loss_name(cfg.loss))
    t0 = time.perf_counter()
    T, _, converged = _outer_loop(problem, T_init, None, T0, hp, cfg, report, cfg.max_outer, None, False)
    report.stage_timings["rigid"] = (time.perf_counter() - t0) * 1e3
    report.stage_outer_iterations["rigid"] = report.outer_iterations
    report.final_pose = T
    report.final_field = DeformationField.zeros(problem.n_points)
    report.converged = converged
    report.pr_mm, report.pr_mode = _score(problem, T, None)
    report.stage_pr_mm["rigid"] = report.pr_mm
    return T, report


def solve_nonrigid(problem: Problem, T_fixed: RigidTransform, theta_init: DeformationField | None = None,
                   hp: Hyperparams | None = None, cfg: SolverConfig | None = None,
                   ell_start: float | None = None, T0: RigidTransform | None = None):
    """Nonrigid refinement. Returns ``(field, report)``; the report's pose is
    ``T_fixed`` unless ``cfg.joint``."""
    hp = hp or Hyperparams()
    cfg = cfg or SolverConfig()
    T0 = T_fixed if T0 is None else T0
    n = problem.n_points
    r = np.zeros((n, 3)) if theta_init is None else np.array(theta_init.displacements, dtype=float)
    report = SolveReport(stage=RIGID_THEN_NONRIGID, loss=_loss_name(cfg.loss))
    t0 = time.perf_counter()
    max_outer = cfg.max_outer_nonrigid or cfg.max_outer
    T, r, converged = _outer_loop(problem, T_fixed, r, T0, hp, cfg, report, max_outer, ell_start, True)
    report.stage_timings["nonrigid"] = (time.perf_counter() - t0) * 1e3
    report.stage_outer_iterations["nonrigid"] = report.outer_iterations
    fld = DeformationField(r)
    report.final_pose = T if cfg.joint else T_fixed
    report.final_field = fld
    report.converged = converged
    report.pr_mm, report.pr_mode = _score(problem, report.final_pose, fld)
    return fld, report


def solve_euclidean_baseline(problem: Problem, T_init: RigidTransform, hp: Hyperparams | None = None,
                             cfg: SolverConfig | None = None):
    """DT-ICP style baseline: same loop with a squared or Huber loss."""
    cfg = cfg or SolverConfig(loss=SquaredL2())
    if isinstance(cfg.loss, ExpKernel):
        cfg = cfg.replace(loss=SquaredL2())
    return solve_rigid(problem, T_init, hp, cfg)


def _fit_worsened(problem: Problem, T: RigidTransform, fld: DeformationField) -> bool:
    """Whether the field raises the RMS distance to the nearest target point."""
    try:
        before = projection_residual(T, None, problem, NEAREST_POINT, unit="px")
        after = projection_residual(T, fld, problem, NEAREST_POINT, unit="px")
    except ValueError:
        return True
    return not after <= before


def register(problem: Problem, T_init: RigidTransform, hp: Hyperparams | None = None,
             cfg: SolverConfig | None = None) -> SolveReport:
    """Rigid stage, then the nonrigid refinement when configured."""
    hp = hp or Hyperparams()
    cfg = cfg or SolverConfig()
    T, report = solve_rigid(problem, T_init, hp, cfg)
    if cfg.stage == RIGID:
        return report
    field_, nr = solve_nonrigid(problem, T, None, hp, cfg, ell_start=report.final_ell, T0=T_init)
    if cfg.nonrigid_guard and not cfg.joint and _fit_worsened(problem, T, field_):
        field_ = DeformationField.zeros(problem.n_points)
        nr.pr_mm, nr.pr_mode = report.pr_mm, report.pr_mode
        nr.final_field = field_
        report.nonrigid_reverted = True
    report.merge(nr, "nonrigid")
    report.stage = RIGID_THEN_NONRIGID
    report.final_pose = nr.final_pose
    report.final_field = field_
    report.final_ell = nr.final_ell
    report.converged = report.converged and nr.converged
    report.pr_mm, report.pr_mode = nr.pr_mm, nr.pr_mode
    report.stage_pr_mm["nonrigid"] = nr.pr_mm
    return report
