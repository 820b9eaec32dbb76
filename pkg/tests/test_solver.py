import math

import numpy as np
import pytest

from itpnp import kernels
from itpnp.centerline import Centerline2D, Centerline3D, find_correspondences
from itpnp.errors import NoCorrespondences
from itpnp.geometry import CameraModel, RigidTransform, projection_jacobian, se3_exp, se3_log
from itpnp.metrics import NEAREST_POINT, pose_error, projection_residual
from itpnp.objective import DeformationField, ExpKernel, Huber, Hyperparams, SquaredL2, loss_weights
from itpnp.problem import Problem
from itpnp.simbench import DisturbanceSpec, brute_force_oracle, sample_disturbance, synthesize_case
from itpnp.solver import (
    RIGID,
    RIGID_THEN_NONRIGID,
    SolverConfig,
    register,
    solve_euclidean_baseline,
    solve_nonrigid,
    solve_rigid,
)

EXACT = Hyperparams(k=1)


def without_timings(report):
    d = report.to_dict()
    d.pop("stage_timings_ms")
    return d


class TestConfig:
    def test_defaults(self):
        cfg = SolverConfig()
        assert (cfg.max_outer, cfg.max_inner, cfg.lm_lambda_init) == (50, 10, 1e-3)
        assert (cfg.lm_lambda_up, cfg.lm_lambda_down) == (10.0, 0.1)
        assert isinstance(cfg.loss, ExpKernel) and cfg.stage == RIGID

    @pytest.mark.parametrize("kw", [
        dict(max_outer=0), dict(max_inner=0), dict(lm_lambda_up=0.5), dict(lm_lambda_down=1.5),
        dict(stage="both"), dict(linear_solver="lu"), dict(max_outer_nonrigid=0),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)


class TestRigid:
    def test_ground_truth_is_a_fixed_point(self, case):
        problem, _, gt, _ = case
        T, rep = solve_rigid(problem, gt, EXACT)
        assert rep.outer_iterations <= 2 and rep.converged
        assert rep.pr_mm < 1e-6
        assert rep.pr_mode == "ground_truth"

    def test_disturbed_starts_mostly_succeed(self, tree):
        spec = DisturbanceSpec(trials=20, seed=3)
        good = 0
        for i in range(spec.trials):
            problem, _, _, start = synthesize_case(tree, disturbance=sample_disturbance(spec, i))
            _, rep = solve_rigid(problem, start)
            good += rep.pr_mm / problem.target.pixel_spacing < 5.0
        assert good >= 19

    def test_damping_and_monotonicity(self, tree):
        problem, _, _, start = synthesize_case(tree, disturbance=sample_disturbance(DisturbanceSpec(seed=5), 0))
        rep = register(problem, start, cfg=SolverConfig(stage=RIGID_THEN_NONRIGID))
        lo, hi = rep.damping_range
        assert 1e-12 <= lo <= hi <= 1e12
        assert rep.monotonicity_violations == 0
        assert all(after < before for before, after in rep.accepted_steps)

    def test_ell_trace_halves_to_floor(self, case):
        problem, _, gt, _ = case
        start = se3_exp([0.0, 0.0, 0.02, 3.0, -2.0, 4.0]) @ gt
        _, rep = solve_rigid(problem, start)
        ells = np.array(rep.ell_trace)
        assert np.all(np.diff(ells) <= 0)
        assert ells.min() >= 1.0

    def test_no_correspondences(self, case):
        problem = case[0]
        with pytest.raises(NoCorrespondences):
            solve_rigid(problem, RigidTransform.from_translation([0, 0, -1000]))

    def test_planar_toy_matches_grid_search(self):
        pts = np.array([[5.0, 0.0, 0.0], [-3.0, 4.0, 0.0], [-2.0, -4.0, 0.0]])
        cl = Centerline3D(pts, (np.arange(3),))
        cam = CameraModel(1000.0, 1000.0, 256.0, 256.0)
        gt = RigidTransform.from_translation([0.0, 0.0, 100.0])
        uv, _ = kernels.project(pts, None, gt.rotation, gt.translation, np.array([1000.0, 1000, 256, 256]))
        uv = uv + np.random.default_rng(0).normal(scale=0.2, size=uv.shape)
        problem = Problem(cl, Centerline2D(uv, 0.3), cam)
        hp = Hyperparams(k=1, lambda1=1.0, init_scale=(1e8, 1e8, 0, 0, 0, 0))
        start = se3_exp([0, 0, 0.01, 0.03, -0.02, 0.1]) @ gt
        cfg = SolverConfig(loss=ExpKernel(3.0), step_tol=1e-12, max_outer=200)
        T, _ = solve_rigid(problem, start, hp, cfg)
        res = 1e-2
        best, _, _ = brute_force_oracle(problem, gt, [0, 0, 5 * res, 5 * res, 5 * res, 5 * res], res,
                                        hp, T0=start, ell=3.0)
        c = se3_log(T @ gt.inverse())
        assert np.all(np.abs(c[:2]) < 1e-6)
        assert np.all(np.abs(c[2:] - best[2:]) <= res)


class TestNonrigid:
    @staticmethod
    def deformed_case(tree, amp, up=8):
        problem, target, gt, _ = synthesize_case(tree)
        P = problem.points
        ext = np.ptp(P, axis=0)

        def field(X):
            return amp * np.column_stack([
                np.sin(2 * np.pi * X[:, 1] / ext[1]),
                np.cos(2 * np.pi * X[:, 0] / ext[0]),
                0.5 * np.sin(2 * np.pi * (X[:, 0] + X[:, 1]) / ext.sum()),
            ])

        dense = []
        for pl in tree.polylines:
            Q = P[pl]
            s = np.linspace(0, len(Q) - 1, (len(Q) - 1) * up + 1)
            dense.append(np.column_stack([np.interp(s, np.arange(len(Q)), Q[:, c]) for c in range(3)]))
        D = np.vstack(dense)
        uv, _ = kernels.project(D, field(D), gt.rotation, gt.translation, problem.cam_array)
        return Problem(tree, Centerline2D(uv, target.pixel_spacing), problem.camera), gt

    def test_recovers_smooth_deformation(self, tree):
        problem, gt = self.deformed_case(tree, amp=2.0)
        before = projection_residual(gt, None, problem, NEAREST_POINT)
        fld, rep = solve_nonrigid(problem, gt, None, Hyperparams(), SolverConfig(max_outer=300))
        assert rep.pr_mode == NEAREST_POINT
        assert rep.pr_mm <= 0.1 * before

    def test_huge_regularizer_pins_field(self, small_problem):
        problem, gt = small_problem
        off = se3_exp([0, 0, 0.01, 0.5, 0, 0]) @ gt
        fld, _ = solve_nonrigid(problem, off, None, Hyperparams(lambda2=1e9))
        assert np.linalg.norm(fld.displacements) < 1e-6

    def test_zero_deformation_stays_zero(self, case):
        problem, _, gt, _ = case
        fld, rep = solve_nonrigid(problem, gt, None, EXACT)
        assert np.abs(fld.displacements).max() < 1e-12
        assert rep.pr_mm < 1e-6

    def test_pose_is_untouched(self, case):
        problem, _, gt, _ = case
        T = se3_exp([0.001, 0.0, -0.002, 0.3, 0.1, -0.2]) @ gt
        _, rep = solve_nonrigid(problem, T)
        np.testing.assert_array_equal(rep.final_pose.as_matrix(), T.as_matrix())

    def test_cg_agrees_with_cholesky(self, small_problem):
        problem, gt = small_problem
        off = se3_exp([0, 0, 0.005, 0.3, -0.2, 0]) @ gt
        a, _ = solve_nonrigid(problem, off, None, EXACT, SolverConfig(max_outer=8))
        b, _ = solve_nonrigid(problem, off, None, EXACT, SolverConfig(max_outer=8, linear_solver="cg"))
        np.testing.assert_allclose(a.displacements, b.displacements, atol=1e-6)

    def test_joint_refinement_moves_pose(self, case):
        problem, _, gt, _ = case
        start = se3_exp([0.0, 0.0, 0.005, 0.5, -0.5, 1.0]) @ gt
        T, _ = solve_rigid(problem, start, EXACT, SolverConfig(max_outer=3))
        _, rep = solve_nonrigid(problem, T, None, EXACT, SolverConfig(joint=True, max_outer=5))
        assert not np.array_equal(rep.final_pose.as_matrix(), T.as_matrix())
        assert math.isfinite(rep.pr_mm)


class TestOutlierInsensitivity:
    def test_far_pair_barely_touches_normal_equations(self, small_problem):
        problem, gt = small_problem
        T = se3_exp([0.002, 0, 0, 0.1, 0.1, 0]) @ gt
        ell = 2.0
        uv, _ = kernels.project(problem.points, None, T.rotation, T.translation, problem.cam_array)
        targets = np.vstack([problem.target_points, uv[0] + [10.5 * ell, 0.0]])
        n = problem.n_points
        base_tgt = np.arange(n, dtype=np.int64)
        args = (problem.points, None, T.rotation, T.translation, problem.cam_array)

        def normal_eq(indptr, tgt):
            diff = uv[np.repeat(np.arange(n), np.diff(indptr))] - targets[tgt]
            w = loss_weights(ExpKernel(), np.linalg.norm(diff, axis=1), ell)
            _, H, g, *_ = kernels.accumulate(*args, indptr, tgt, w, targets)
            return H, g

        H0, g0 = normal_eq(np.arange(n + 1, dtype=np.int64), base_tgt)
        indptr = np.r_[0, np.arange(2, n + 2)].astype(np.int64)
        H1, g1 = normal_eq(indptr, np.r_[0, n, np.arange(1, n)].astype(np.int64))
        assert np.abs(H1 - H0).max() / np.abs(H0).max() < 1e-20
        assert np.abs(g1 - g0).max() / np.abs(H0).max() < 1e-20


class TestBaseline:
    def test_agrees_with_kernel_solver_on_easy_case(self, tree):
        spec = DisturbanceSpec(angular_std=0.5, translation_std=1.0, seed=3)
        problem, _, _, start = synthesize_case(tree, disturbance=sample_disturbance(spec, 0))
        Tk, _ = solve_rigid(problem, start, EXACT)
        for loss in (SquaredL2(), Huber(5.0)):
            Tb, rep = solve_euclidean_baseline(problem, start, EXACT, SolverConfig(loss=loss))
            deg, mm = pose_error(Tb, Tk)
            assert deg < 0.1 and mm < 0.5
            assert rep.loss == loss.name

    def test_kernel_loss_is_swapped_for_l2(self, small_problem):
        problem, gt = small_problem
        _, rep = solve_euclidean_baseline(problem, gt, cfg=SolverConfig())
        assert rep.loss == SquaredL2().name

    def test_single_step_is_linearized_pnp(self, small_problem):
        problem, gt = small_problem
        start = se3_exp([0.0005, -0.0003, 0.0004, 0.02, -0.01, 0.05]) @ gt
        uv, _ = kernels.project(problem.points, None, start.rotation, start.translation, problem.cam_array)
        corr = find_correspondences(uv, problem.target, 1, np.inf)
        np.testing.assert_array_equal(corr.tgt, np.arange(problem.n_points))
        H = np.zeros((6, 6))
        g = np.zeros(6)
        for p, q, u in zip(problem.points, problem.target_points, uv):
            J, _ = projection_jacobian(p, start, problem.camera)
            H += J.T @ J
            g += J.T @ (u - q)
        delta = np.linalg.solve(H + 1e-12 * np.diag(np.diag(H)), -g)
        cfg = SolverConfig(loss=SquaredL2(), max_outer=1, max_inner=1, lm_lambda_init=1e-12)
        T, _ = solve_euclidean_baseline(problem, start, Hyperparams(k=1, lambda1=0.0), cfg)
        np.testing.assert_allclose(T.as_matrix(), (se3_exp(delta) @ start).as_matrix(), atol=1e-10)


class TestRegister:
    def test_rigid_stage_equals_solve_rigid(self, case):
        problem, _, gt, _ = case
        start = se3_exp([0.01, 0, 0, 1, 2, 0]) @ gt
        T, a = solve_rigid(problem, start)
        b = register(problem, start, cfg=SolverConfig(stage=RIGID))
        np.testing.assert_array_equal(b.final_pose.as_matrix(), T.as_matrix())
        assert without_timings(a) == without_timings(b)

    def test_nonrigid_does_not_worsen_fit(self, tree):
        spec = DisturbanceSpec(trials=10, seed=11)
        for i in range(spec.trials):
            problem, _, _, start = synthesize_case(tree, disturbance=sample_disturbance(spec, i))
            rep = register(problem, start, cfg=SolverConfig(stage=RIGID_THEN_NONRIGID))
            assert rep.pr_mm <= rep.stage_pr_mm["rigid"]

    def test_reverted_field_is_zero(self, case):
        problem, _, gt, _ = case
        rep = register(problem, gt, cfg=SolverConfig(stage=RIGID_THEN_NONRIGID))
        if rep.nonrigid_reverted:
            assert not np.any(rep.final_field.displacements)

    def test_timings_and_determinism(self, tree):
        problem, _, _, start = synthesize_case(tree, disturbance=sample_disturbance(DisturbanceSpec(seed=2), 4))
        cfg = SolverConfig(stage=RIGID_THEN_NONRIGID)
        a = register(problem, start, cfg=cfg)
        b = register(problem, start, cfg=cfg)
        assert set(a.stage_timings) == {"rigid", "nonrigid"}
        assert all(v >= 0 for v in a.stage_timings.values())
        assert without_timings(a) == without_timings(b)

    def test_report_field_shape(self, case):
        problem, _, gt, _ = case
        rep = register(problem, gt, EXACT, SolverConfig(stage=RIGID_THEN_NONRIGID))
        assert isinstance(rep.final_field, DeformationField)
        assert rep.final_field.displacements.shape == (problem.n_points, 3)
