"""SE(3) arithmetic and the pin-hole projection model.

Twists are ordered ``(omega, v)``: rotation part first (radians), then
translation part (mm). Pose updates are left-multiplied, ``T <- exp(xi) T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AngleAtPi, DepthBelowMin

Z_MIN = 1e-3
SMALL_ANGLE = 1e-8
# series branch for the SE(3) Jacobian coefficients, whose closed forms cancel badly
SERIES_ANGLE = 0.1


def hat(w) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _norm3(w) -> float:
    return math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _readonly(self.rotation)
        t = _readonly(self.translation).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def _raw(cls, R: np.ndarray, t: np.ndarray) -> "RigidTransform":
        """Wrap freshly computed arrays without copying or validating."""
        R.setflags(write=False)
        t.setflags(write=False)
        obj = object.__new__(cls)
        object.__setattr__(obj, "rotation", R)
        object.__setattr__(obj, "translation", t)
        return obj

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), np.asarray(t, dtype=float))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix or 16 numbers, got shape {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self * other``: apply ``other`` first."""
        return RigidTransform._raw(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform._raw(Rt.copy(), -(Rt @ self.translation))

    def apply(self, points) -> np.ndarray:
        """Transform a 3-vector or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def adjoint(self) -> np.ndarray:
        """6x6 adjoint for ``(omega, v)`` twists: ``T exp(xi) T^-1 = exp(Ad xi)``."""
        R, t = self.rotation, self.translation
        ad = np.zeros((6, 6))
        ad[:3, :3] = R
        ad[3:, 3:] = R
        ad[3:, :3] = hat(t) @ R
        return ad

    def __repr__(self) -> str:
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def _so3_coeffs(theta: float) -> tuple[float, float, float]:
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s = math.sin(theta)
    one_minus_c = 2.0 * math.sin(0.5 * theta) ** 2
    return s / theta, one_minus_c / theta**2, (theta - s) / theta**3


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = _norm3(omega)
    a, b, _ = _so3_coeffs(theta)
    W = hat(omega)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    skew = vee(R - R.T)  # 2 sin(theta) * axis
    s2 = _norm3(skew)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(0.5 * s2, c)
    if math.pi - theta < 1e-9:
        raise AngleAtPi(f"rotation angle {theta!r} is within 1e-9 of pi")
    if theta < SMALL_ANGLE:
        return 0.5 * skew
    if theta < math.pi - 1e-3:
        return theta / (2.0 * math.sin(theta)) * skew
    # near pi the skew part vanishes; recover the axis from the symmetric part
    S = 0.5 * (R + R.T) - c * np.eye(3)
    S /= 1.0 - c
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / math.sqrt(S[k, k])
    if axis @ skew < 0:
        axis = -axis
    return theta * axis


def se3_exp(xi) -> RigidTransform:
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[:3], xi[3:]
    theta = _norm3(omega)
    a, b, c = _so3_coeffs(theta)
    W = hat(omega)
    W2 = W @ W
    R = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    return RigidTransform._raw(R, V @ v)


def _so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = _norm3(omega)
    W = hat(omega)
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        half = 0.5 * theta
        d = (1.0 - half * math.cos(half) / math.sin(half)) / theta**2
    return np.eye(3) - 0.5 * W + d * (W @ W)


def se3_log(T: RigidTransform) -> np.ndarray:
    omega = so3_log(T.rotation)
    Vinv = _so3_left_jacobian_inv(omega)
    return np.concatenate([omega, Vinv @ T.translation])


def _q_matrix(omega: np.ndarray, v: np.ndarray) -> np.ndarray:
    theta = _norm3(omega)
    W = hat(omega)
    P = hat(v)
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        t4 = t2 * t2
        a = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0
        b = 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0
        c = 1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0
    else:
        s, co = math.sin(theta), math.cos(theta)
        a = (theta - s) / theta**3
        b = (theta * theta + 2.0 * co - 2.0) / (2.0 * theta**4)
        c = (2.0 * theta - 3.0 * s + theta * co) / (2.0 * theta**5)
    WP = W @ P
    PW = P @ W
    WPW = WP @ W
    WW = W @ W
    return (
        0.5 * P
        + a * (WP + PW + WPW)
        + b * (WW @ P + PW @ W - 3.0 * WPW)
        + c * (WPW @ W + W @ WPW)
    )


def se3_left_jacobian_inv(xi) -> np.ndarray:
    """Inverse left Jacobian: ``log(exp(d) exp(xi)) ~ xi + J^-1 d`` for small d."""
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[:3], xi[3:]
    Jinv = _so3_left_jacobian_inv(omega)
    Q = _q_matrix(omega, v)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ Q @ Jinv
    return out


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        """3x4 intrinsic matrix."""
        return np.array(
            [[self.fx, 0.0, self.cx, 0.0], [0.0, self.fy, self.cy, 0.0], [0.0, 0.0, 1.0, 0.0]]
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=float)


def project(p, T: RigidTransform, cam: CameraModel) -> np.ndarray:
    x, y, z = T.apply(p)
    if not z >= Z_MIN:
        raise DepthBelowMin(f"transformed depth {z!r} is below z_min={Z_MIN}")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def project_points(points: np.ndarray, T: RigidTransform, cam: CameraModel) -> np.ndarray:
    """Vectorized :func:`project`; raises if any depth is below ``Z_MIN``."""
    X = T.apply(points)
    z = X[:, 2]
    if not np.all(z >= Z_MIN):
        bad = int(np.argmin(np.where(np.isnan(z), -np.inf, z)))
        raise DepthBelowMin(f"point {bad} has transformed depth {z[bad]!r} below z_min={Z_MIN}")
    return np.column_stack([cam.fx * X[:, 0] / z + cam.cx, cam.fy * X[:, 1] / z + cam.cy])


def projection_jacobian(p, T: RigidTransform, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of :func:`project`.

    Returns ``(J_xi, J_p)``: the 2x6 derivative with respect to a left twist
    perturbation ``exp(xi) T`` and the 2x3 derivative with respect to ``p``.
    """
    X = T.apply(p)
    x, y, z = X
    if not z >= Z_MIN:
        raise DepthBelowMin(f"transformed depth {z!r} is below z_min={Z_MIN}")
    iz = 1.0 / z
    J_X = np.array(
        [[cam.fx * iz, 0.0, -cam.fx * x * iz * iz], [0.0, cam.fy * iz, -cam.fy * y * iz * iz]]
    )
    J_xi = np.hstack([-J_X @ hat(X), J_X])
    return J_xi, J_X @ T.rotation
