"""Rigid-body and pinhole-camera geometry.

Conventions used throughout the package:

- Rotations are 3x3 orthonormal float64 matrices with det +1.
- A pose (R, t) maps object-space points to camera space: y = R x + t.
- Euler angles are intrinsic Z-Y-X (yaw, pitch, roll), wrapped to [-pi, pi).
- Pixel coordinates are continuous; integer values address sample centers,
  so depth[v, u] is the depth sampled exactly at pixel (u, v).
- All lengths are meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(angle):
    """Wrap an angle (or array of angles) to [-pi, pi)."""
    return (np.asarray(angle, dtype=float) + math.pi) % TWO_PI - math.pi


def skew(v) -> np.ndarray:
    """Skew-symmetric cross-product matrix of a 3-vector."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega) -> np.ndarray:
    """Rodrigues exponential map so(3) -> SO(3)."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < 1e-10:
        # 2nd-order Taylor; error O(theta^3) is below double precision here.
        return np.eye(3) + K + 0.5 * (K @ K)
    Kn = K / theta
    return np.eye(3) + math.sin(theta) * Kn + (1.0 - math.cos(theta)) * (Kn @ Kn)


def so3_log(R) -> np.ndarray:
    """Logarithm map SO(3) -> so(3), returning a rotation vector.

    Handles the small-angle and near-pi branches explicitly.
    """
    R = np.asarray(R, dtype=float)
    cos_theta = float(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0))
    theta = math.acos(cos_theta)
    if theta < 1e-10:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if math.pi - theta < 1e-6:
        # Near pi the antisymmetric part vanishes; recover the axis from the
        # symmetric part instead.
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        k = int(np.argmax(axis))
        axis = A[:, k] / max(axis[k], 1e-12)
        axis = axis / np.linalg.norm(axis)
        # Fix the sign using the off-diagonal antisymmetric residue.
        w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(w, axis) < 0.0:
            axis = -axis
        return theta * axis
    scale = theta / (2.0 * math.sin(theta))
    return scale * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def so3_left_jacobian(omega) -> np.ndarray:
    """Left Jacobian of SO(3): d/d(omega) Exp(omega) = [J_l(omega) e_j]^ Exp(omega)."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * K + b * (K @ K)


def rotation_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_euler(euler) -> np.ndarray:
    """Intrinsic Z-Y-X Euler angles (psi, theta, phi) to a rotation matrix."""
    psi, theta, phi = np.asarray(euler, dtype=float)
    return rotation_z(psi) @ rotation_y(theta) @ rotation_x(phi)


def euler_from_rotation(R) -> np.ndarray:
    """Rotation matrix to intrinsic Z-Y-X Euler angles in [-pi, pi).

    At gimbal lock (|theta| = pi/2) the yaw/roll split is degenerate; yaw is
    set to zero there.
    """
    R = np.asarray(R, dtype=float)
    sy = math.hypot(R[0, 0], R[1, 0])
    theta = math.atan2(-R[2, 0], sy)
    if sy > 1e-9:
        psi = math.atan2(R[1, 0], R[0, 0])
        phi = math.atan2(R[2, 1], R[2, 2])
    else:
        psi = 0.0
        phi = math.atan2(-R[1, 2], R[1, 1])
    return wrap_angle(np.array([psi, theta, phi]))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation drawn uniformly from SO(3) (via a uniform unit quaternion)."""
    u1, u2, u3 = rng.random(3)
    r1, r2 = math.sqrt(1.0 - u1), math.sqrt(u1)
    t1, t2 = TWO_PI * u2, TWO_PI * u3
    w, x = math.cos(t2) * r2, math.sin(t1) * r1
    y, z = math.cos(t1) * r1, math.sin(t2) * r2
    return quaternion_to_rotation(np.array([w, x, y, z]))


def quaternion_to_rotation(q) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quaternion_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def is_rotation(R, atol: float = 1e-6) -> bool:
    R = np.asarray(R)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(
        np.allclose(R @ R.T, np.eye(3), atol=atol) and np.linalg.det(R) > 0.0
    )


def orthonormalize(M) -> np.ndarray:
    """Project a near-rotation onto SO(3) via SVD."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    R = U @ Vt
    if np.linalg.det(R) < 0.0:
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return R


def rotation_geodesic_distance(a, b) -> float:
    """Geodesic distance on SO(3) in radians, clamped to [0, pi]."""
    t = float(np.clip((np.trace(np.asarray(a).T @ np.asarray(b)) - 1.0) / 2.0, -1.0, 1.0))
    return math.acos(t)


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus image resolution. Focal lengths and principal
    point in pixels.

    The principal point may fall outside [0, width) x [0, height) for cameras
    produced by off-center crops; only positivity of the focal lengths and the
    resolution is enforced here.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError("focal lengths must be positive")
        if not (self.width >= 1 and self.height >= 1):
            raise ValueError("resolution must be at least 1x1")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def rescaled(self, scale: float) -> "Camera":
        """Camera for the same view resampled by `scale` (pixel centers align:
        original pixel u maps to (u + 0.5) * scale - 0.5)."""
        return Camera(
            fx=self.fx * scale,
            fy=self.fy * scale,
            cx=(self.cx + 0.5) * scale - 0.5,
            cy=(self.cy + 0.5) * scale - 0.5,
            width=int(round(self.width * scale)),
            height=int(round(self.height * scale)),
        )


@dataclass(frozen=True)
class Pose:
    """Rigid transform from object space to camera space: y = R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("pose entries must be finite")
        if not is_rotation(R, atol=1e-6):
            raise ValueError("rotation is not orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def transform(self, points) -> np.ndarray:
        """Apply the pose to points of shape (..., 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self o other)(x) = self(other(x))."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)


def compose(a: Pose, b: Pose) -> Pose:
    """Compose two poses: apply b first, then a."""
    return a.compose(b)


def invert(p: Pose) -> Pose:
    return p.inverse()


def apply_left_increment(pose: Pose, omega, upsilon) -> Pose:
    """Left-apply the rigid increment (exp(omega^), upsilon) to a pose.

    R' = exp(omega^) R,  t' = exp(omega^) t + upsilon.  This is the local
    parameterization used by the pose solvers.
    """
    E = so3_exp(omega)
    return Pose(E @ pose.rotation, E @ pose.translation + np.asarray(upsilon, float))


def left_increment_coords(base: Pose, target: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of apply_left_increment: coordinates (omega, upsilon) such that
    target = apply_left_increment(base, omega, upsilon)."""
    omega = so3_log(target.rotation @ base.rotation.T)
    upsilon = target.translation - so3_exp(omega) @ base.translation
    return omega, upsilon


def project(camera: Camera, points) -> np.ndarray:
    """Pinhole projection of camera-space points (..., 3) to pixels (..., 2).

    Raises ValueError("behind camera") if any point has non-positive depth.
    """
    pts = np.asarray(points, dtype=float)
    z = pts[..., 2]
    if np.any(z <= 0.0):
        raise ValueError("behind camera")
    u = camera.fx * pts[..., 0] / z + camera.cx
    v = camera.fy * pts[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def lift(camera: Camera, pose: Pose, pixel, depth) -> np.ndarray:
    """Back-project pixels (..., 2) with depths (...,) to object-space points.

    Computes R^T (K^-1 * depth * (u, v, 1)^T - t); the exact inverse of
    projecting the posed point, so project(camera, pose.transform(result))
    recovers the pixel.
    """
    px = np.asarray(pixel, dtype=float)
    d = np.asarray(depth, dtype=float)
    if np.any(d <= 0.0):
        raise ValueError("depth must be positive")
    x = (px[..., 0] - camera.cx) / camera.fx * d
    y = (px[..., 1] - camera.cy) / camera.fy * d
    cam_pts = np.stack([x, y, d], axis=-1)
    return (cam_pts - pose.translation) @ pose.rotation
