import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from itpnp.errors import AngleAtPi, DepthBelowMin
from itpnp.geometry import (
    CameraModel,
    RigidTransform,
    hat,
    project,
    project_points,
    projection_jacobian,
    se3_exp,
    se3_left_jacobian_inv,
    se3_log,
    so3_exp,
    so3_log,
)

finite = st.floats(-3.0, 3.0, allow_nan=False)
twists = st.lists(finite, min_size=6, max_size=6).map(np.array)


def rand_twist(rng, max_angle=3.0, trans=50.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return np.r_[axis * rng.uniform(0, max_angle), rng.normal(scale=trans, size=3)]


class TestExp:
    def test_zero_is_identity(self):
        T = se3_exp(np.zeros(6))
        np.testing.assert_array_equal(T.rotation, np.eye(3))
        np.testing.assert_array_equal(T.translation, np.zeros(3))

    def test_pure_translation(self):
        T = se3_exp([0, 0, 0, 1, 2, 3])
        np.testing.assert_array_equal(T.rotation, np.eye(3))
        np.testing.assert_allclose(T.translation, [1, 2, 3])

    def test_quarter_turn_about_z(self):
        T = se3_exp([0, 0, math.pi / 2, 0, 0, 0])
        np.testing.assert_allclose(T.apply([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-15)

    def test_rotation_matches_scipy(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            w = rng.normal(size=3)
            np.testing.assert_allclose(so3_exp(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-13)

    def test_matrix_exponential_oracle(self):
        from scipy.linalg import expm

        rng = np.random.default_rng(2)
        for _ in range(100):
            xi = rand_twist(rng)
            X = np.zeros((4, 4))
            X[:3, :3] = hat(xi[:3])
            X[:3, 3] = xi[3:]
            np.testing.assert_allclose(se3_exp(xi).as_matrix(), expm(X), atol=1e-9)

    def test_tiny_angle_branch_is_smooth(self):
        for a in (1e-12, 1e-9, 5e-9, 2e-8, 1e-6):
            w = np.array([a, -a, 0.5 * a])
            np.testing.assert_allclose(so3_exp(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-15)


class TestLog:
    def test_identity_is_zero(self):
        np.testing.assert_array_equal(se3_log(RigidTransform.identity()), np.zeros(6))

    def test_pure_translation(self):
        np.testing.assert_allclose(se3_log(RigidTransform.from_translation([5, 0, 0])), [0, 0, 0, 5, 0, 0])

    def test_round_trip_random(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            xi = rand_twist(rng)
            np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-8)

    @given(twists)
    def test_round_trip_property(self, xi):
        if np.linalg.norm(xi[:3]) >= math.pi - 1e-6:
            xi = xi.copy()
            xi[:3] *= (math.pi - 1e-3) / np.linalg.norm(xi[:3])
        np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-8)

    def test_near_pi_round_trip(self):
        for gap in (1e-3, 1e-4, 1e-5, 2e-6):
            w = np.array([0.3, -0.5, 0.8])
            w *= (math.pi - gap) / np.linalg.norm(w)
            np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-8)

    def test_exact_pi_rejected(self):
        with pytest.raises(AngleAtPi):
            so3_log(np.diag([1.0, -1.0, -1.0]))

    def test_rotation_log_matches_scipy(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            R = Rotation.random(random_state=rng)
            if R.magnitude() > math.pi - 1e-4:
                continue
            np.testing.assert_allclose(so3_log(R.as_matrix()), R.as_rotvec(), atol=1e-10)


class TestRigidTransform:
    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            T = se3_exp(rand_twist(rng))
            np.testing.assert_allclose((T @ T.inverse()).as_matrix(), np.eye(4), atol=1e-9)

    def test_compose_matches_matrix_product(self):
        rng = np.random.default_rng(6)
        A, B = se3_exp(rand_twist(rng)), se3_exp(rand_twist(rng))
        np.testing.assert_allclose((A @ B).as_matrix(), A.as_matrix() @ B.as_matrix(), atol=1e-12)

    def test_orthonormal_after_many_compositions(self):
        rng = np.random.default_rng(7)
        steps = [se3_exp(rand_twist(rng, 0.5, 1.0)) for _ in range(64)]
        T = RigidTransform.identity()
        for i in range(20000):
            T = steps[i % 64] @ T
        R = T.rotation
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
        assert abs(np.linalg.det(R) - 1.0) < 1e-9

    def test_values_are_immutable(self):
        T = RigidTransform.identity()
        with pytest.raises(ValueError):
            T.rotation[0, 0] = 2.0
        U = T @ T
        with pytest.raises(ValueError):
            U.translation[0] = 1.0

    def test_adjoint_conjugation(self):
        rng = np.random.default_rng(8)
        T, xi = se3_exp(rand_twist(rng)), rand_twist(rng, 1.0, 5.0)
        lhs = (T @ se3_exp(xi) @ T.inverse()).as_matrix()
        np.testing.assert_allclose(lhs, se3_exp(T.adjoint() @ xi).as_matrix(), atol=1e-9)

    def test_from_matrix_accepts_sixteen_numbers(self):
        m = np.arange(16.0).reshape(4, 4)
        m[3] = [0, 0, 0, 1]
        T = RigidTransform.from_matrix(m.reshape(-1))
        np.testing.assert_array_equal(T.translation, m[:3, 3])
        with pytest.raises(ValueError):
            RigidTransform.from_matrix(np.zeros(12))


def test_left_jacobian_inverse_by_finite_differences():
    rng = np.random.default_rng(9)
    h = 1e-6
    for _ in range(50):
        xi = rand_twist(rng, 2.5, 10.0)
        J = se3_left_jacobian_inv(xi)
        num = np.zeros((6, 6))
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            num[:, k] = (se3_log(se3_exp(e) @ se3_exp(xi)) - se3_log(se3_exp(-e) @ se3_exp(xi))) / (2 * h)
        np.testing.assert_allclose(J, num, atol=1e-6 * max(1.0, np.abs(num).max()))


class TestProject:
    def test_optical_axis(self):
        cam = CameraModel(1000, 1000, 256, 256)
        np.testing.assert_allclose(project([0, 0, 100], RigidTransform.identity(), cam), [256, 256])

    def test_hand_case(self):
        cam = CameraModel(2, 2, 10, 5)
        np.testing.assert_allclose(project([1, 2, 2], RigidTransform.identity(), cam), [11, 7])

    def test_translated_point(self):
        cam = CameraModel(100, 100, 0, 0)
        T = RigidTransform.from_translation([0, 0, 10])
        np.testing.assert_allclose(project([1, 0, 0], T, cam), [10, 0])

    def test_depth_floor(self):
        cam = CameraModel(100, 100, 0, 0)
        with pytest.raises(DepthBelowMin):
            project([0, 0, 0], RigidTransform.identity(), cam)
        with pytest.raises(DepthBelowMin):
            project_points(np.array([[0, 0, 5.0], [0, 0, -1.0]]), RigidTransform.identity(), cam)

    def test_rejects_bad_focal_length(self):
        with pytest.raises(ValueError):
            CameraModel(0, 1, 0, 0)

    def test_intrinsic_matrix_layout(self):
        K = CameraModel(3, 4, 5, 6).K
        assert K.shape == (3, 4)
        np.testing.assert_array_equal(K[:, :3], [[3, 0, 5], [0, 4, 6], [0, 0, 1]])

    def test_composition_invariance(self):
        rng = np.random.default_rng(10)
        cam = CameraModel(900, 950, 250, 260)
        for _ in range(50):
            A = se3_exp(rand_twist(rng, 0.3, 5.0)) @ RigidTransform.from_translation([0, 0, 400])
            B = se3_exp(rand_twist(rng, 0.3, 5.0))
            p = rng.normal(scale=20, size=3)
            direct = project(p, A @ B, cam)
            staged = project(B.apply(p), A, cam)
            np.testing.assert_allclose(direct, staged, atol=1e-9)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(11)
        cam = CameraModel(900, 950, 250, 260)
        T = se3_exp(rand_twist(rng, 0.3, 5.0)) @ RigidTransform.from_translation([0, 0, 400])
        P = rng.normal(scale=20, size=(30, 3))
        np.testing.assert_allclose(project_points(P, T, cam), [project(p, T, cam) for p in P], rtol=1e-14)


class TestProjectionJacobian:
    def test_against_finite_differences(self):
        rng = np.random.default_rng(12)
        h = 1e-5
        for _ in range(500):
            cam = CameraModel(*rng.uniform(300, 3000, 2), *rng.uniform(0, 512, 2))
            T = se3_exp(rand_twist(rng, 0.5, 5.0)) @ RigidTransform.from_translation([0, 0, rng.uniform(100, 1000)])
            p = rng.normal(scale=30, size=3)
            Jxi, Jp = projection_jacobian(p, T, cam)
            nxi = np.column_stack([
                (project(p, se3_exp(h * e) @ T, cam) - project(p, se3_exp(-h * e) @ T, cam)) / (2 * h)
                for e in np.eye(6)
            ])
            npt = np.column_stack([(project(p + h * e, T, cam) - project(p - h * e, T, cam)) / (2 * h)
                                   for e in np.eye(3)])
            for a, n in ((Jxi, nxi), (Jp, npt)):
                assert np.abs(a - n).max() <= 1e-5 * max(1.0, np.abs(n).max())

    def test_translation_column_on_axis(self):
        cam = CameraModel(700, 700, 0, 0)
        Jxi, _ = projection_jacobian([0, 0, 50.0], RigidTransform.identity(), cam)
        assert Jxi[0, 3] == pytest.approx(700 / 50)

    def test_point_jacobian_pure_translation(self):
        cam = CameraModel(700, 650, 3, 4)
        T = RigidTransform.from_translation([2, -1, 80])
        p = np.array([3.0, 5.0, 7.0])
        x, y, z = p + T.translation
        _, Jp = projection_jacobian(p, T, cam)
        expect = np.array([[700, 0, -700 * x / z], [0, 650, -650 * y / z]]) / z
        np.testing.assert_allclose(Jp, expect, rtol=1e-14)
