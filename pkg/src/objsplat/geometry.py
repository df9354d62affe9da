"""Rigid-body transforms, camera models, and Gaussian projection.

Conventions used everywhere in the package:

* quaternions are (w, x, y, z), unit norm, canonicalized to w >= 0;
* a :class:`PoseSE3` maps points from its source frame into its target
  frame via ``R @ p + t``;
* twists are ``(omega, v)`` with ``omega`` an axis-angle rotation vector in
  radians and ``v`` the translation part of the exponential chart;
* cameras look down +z (OpenCV style), pixel ``u = fx*x/z + cx``, and the
  center of pixel ``(row, col)`` sits at ``(col + 0.5, row + 0.5)``;
* angles are radians internally, one scene unit is one meter in generated
  scenarios.

All pose math is float64; the float32 discipline of the pixel pipeline
starts in :mod:`objsplat.raster`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi, BehindCamera

_TAYLOR_EPS = 1e-8


def normalize_quat(q: np.ndarray) -> np.ndarray:
    """Unit-norm quaternion with w >= 0 (sign canonicalization)."""
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
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


def quat_mul_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product broadcast over rows: a (4,) or (N,4) times b (N,4)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (N,3,3) from unit quaternions (N,4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the canonical (w >= 0) quaternion."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return normalize_quat(q)


def quat_rotate(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    return quat_to_matrix(q) @ np.asarray(p, dtype=np.float64)


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    angle = float(np.linalg.norm(omega))
    K = _skew(omega)
    if angle < _TAYLOR_EPS:
        return np.eye(3) + K + 0.5 * (K @ K)
    A = math.sin(angle) / angle
    B = (1.0 - math.cos(angle)) / (angle * angle)
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R. Raises AngleNearPi within 1e-6 of pi."""
    R = np.asarray(R, dtype=np.float64)
    cos_angle = min(1.0, max(-1.0, 0.5 * (np.trace(R) - 1.0)))
    angle = math.acos(cos_angle)
    if angle > math.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {angle:.9f} within 1e-6 of pi")
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < _TAYLOR_EPS:
        return w
    return w * (angle / math.sin(angle))


def _so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(omega))
    K = _skew(omega)
    if angle < _TAYLOR_EPS:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a2 = angle * angle
    B = (1.0 - math.cos(angle)) / a2
    C = (angle - math.sin(angle)) / (a2 * angle)
    return np.eye(3) + B * K + C * (K @ K)


def _so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(omega))
    K = _skew(omega)
    if angle < _TAYLOR_EPS:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = 0.5 * angle
    cot = half / math.tan(half)
    coeff = (1.0 - cot) / (angle * angle)
    return np.eye(3) - 0.5 * K + coeff * (K @ K)


@dataclass(frozen=True)
class Twist:
    """Tangent-space rigid motion: rotation vector omega, translation part v."""

    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=np.float64).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64).reshape(3))

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(xi: np.ndarray) -> "Twist":
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return Twist(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform stored as unit quaternion (w,x,y,z) plus translation."""

    q: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "q", normalize_quat(np.asarray(self.q, dtype=np.float64).reshape(4)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3).copy())

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(R: np.ndarray, t: np.ndarray) -> "PoseSE3":
        return PoseSE3(matrix_to_quat(R), t)

    @staticmethod
    def from_axis_angle(axis: np.ndarray, angle: float, t: np.ndarray | None = None) -> "PoseSE3":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        q = np.concatenate([[math.cos(half)], math.sin(half) * axis])
        return PoseSE3(q, np.zeros(3) if t is None else t)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return PoseSE3(quat_mul(self.q, other.q), quat_rotate(self.q, other.t) + self.t)

    def inverse(self) -> "PoseSE3":
        qc = np.array([self.q[0], -self.q[1], -self.q[2], -self.q[3]])
        return PoseSE3(qc, -quat_rotate(qc, self.t))

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Rigid action R @ p + t; accepts a single point or an (N,3) array."""
        p = np.asarray(p, dtype=np.float64)
        R = self.rotation_matrix()
        if p.ndim == 1:
            return R @ p + self.t
        return p @ R.T + self.t

    def rotation_angle(self) -> float:
        w = min(1.0, abs(float(self.q[0])))
        return 2.0 * math.acos(w)

    def angle_to(self, other: "PoseSE3") -> float:
        """Geodesic rotation distance between the two poses."""
        return self.inverse().compose(other).rotation_angle()

    def translation_distance(self, other: "PoseSE3") -> float:
        return float(np.linalg.norm(self.t - other.t))


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    return a.compose(b)


def inverse(T: PoseSE3) -> PoseSE3:
    return T.inverse()


def transform_point(T: PoseSE3, p: np.ndarray) -> np.ndarray:
    return T.apply(p)


def se3_exp(xi: Twist) -> PoseSE3:
    R = so3_exp(xi.omega)
    t = _so3_left_jacobian(xi.omega) @ xi.v
    return PoseSE3.from_matrix(R, t)


def se3_log(T: PoseSE3) -> Twist:
    omega = so3_log(T.rotation_matrix())
    v = _so3_left_jacobian_inv(omega) @ T.t
    return Twist(omega, v)


def rotation_about_point(axis: np.ndarray, angle: float, point: np.ndarray) -> PoseSE3:
    """World-frame pose rotating by ``angle`` about an axis through ``point``."""
    rot = PoseSE3.from_axis_angle(axis, angle)
    point = np.asarray(point, dtype=np.float64)
    return PoseSE3(rot.q, point - rot.apply(point) + rot.t)


def apply_twist_about(base: PoseSE3, xi: Twist, anchor: np.ndarray) -> PoseSE3:
    """Left-compose a twist acting about ``anchor`` onto ``base``.

    The increment maps x to exp(omega)·(x − anchor) + anchor + v, which is the
    parameterization the tracker optimizes (rotation about the posed cluster
    centroid keeps rotation/translation gradients decoupled).
    """
    R_inc = so3_exp(xi.omega)
    anchor = np.asarray(anchor, dtype=np.float64)
    inc = PoseSE3.from_matrix(R_inc, anchor - R_inc @ anchor + xi.v)
    return inc.compose(base)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: PoseSE3 = field(default_factory=PoseSE3.identity)

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @staticmethod
    def look_at(
        eye: np.ndarray,
        target: np.ndarray,
        up: np.ndarray,
        fx: float,
        fy: float,
        width: int,
        height: int,
    ) -> "CameraModel":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        R_cw = np.stack([right, down, fwd])  # rows: camera axes in world
        return CameraModel(
            fx=fx,
            fy=fy,
            cx=width / 2.0,
            cy=height / 2.0,
            width=width,
            height=height,
            world_to_camera=PoseSE3.from_matrix(R_cw, -R_cw @ eye),
        )

    def crop(self, x0: int, y0: int, width: int, height: int) -> "CameraModel":
        """Sub-window camera sharing the pinhole; pixel (0,0) maps to (x0,y0)."""
        return CameraModel(
            fx=self.fx,
            fy=self.fy,
            cx=self.cx - x0,
            cy=self.cy - y0,
            width=width,
            height=height,
            world_to_camera=self.world_to_camera,
        )

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return self.world_to_camera.apply(points)

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points -> (pixel uv, camera-frame depth). No culling."""
        pc = np.atleast_2d(self.to_camera(points))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def deproject(self, u: np.ndarray, v: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Pixel coordinates + camera-frame depth -> world points."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        x = (u - self.cx) / self.fx * z
        y = (v - self.cy) / self.fy * z
        pc = np.stack([x, y, z], axis=-1)
        return self.world_to_camera.inverse().apply(pc)


def perspective_jacobians(
    cam: CameraModel, t_cam: np.ndarray, clamp_factor: float = 1.3
) -> np.ndarray:
    """EWA perspective Jacobians (N,2,3) at camera-frame points ``t_cam``.

    The x/z and y/z ratios are clamped to ``clamp_factor`` times the frustum
    half-extent before building J, the usual splatting stabilization for
    Gaussians far outside the view cone.
    """
    t_cam = np.atleast_2d(np.asarray(t_cam, dtype=np.float64))
    tz = t_cam[:, 2]
    lim_x = clamp_factor * (0.5 * cam.width / cam.fx)
    lim_y = clamp_factor * (0.5 * cam.height / cam.fy)
    tx = tz * np.clip(t_cam[:, 0] / tz, -lim_x, lim_x)
    ty = tz * np.clip(t_cam[:, 1] / tz, -lim_y, lim_y)
    n = t_cam.shape[0]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * tx / (tz * tz)
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * ty / (tz * tz)
    return J


def project_gaussians(
    cam: CameraModel, means: np.ndarray, cov3d: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized EWA projection of world-frame Gaussians.

    Returns (means2d (N,2), cov2d (N,2,2), depth (N,)). Points with
    camera-frame z <= 1e-4 get depth <= 1e-4; callers cull on that.
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    cov3d = np.asarray(cov3d, dtype=np.float64).reshape(-1, 3, 3)
    W = cam.world_to_camera.rotation_matrix()
    t_cam = cam.to_camera(means)
    t_cam = np.atleast_2d(t_cam)
    cov_cam = np.einsum("ij,njk,lk->nil", W, cov3d, W)
    J = perspective_jacobians(cam, t_cam)
    cov2d = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)
    z = t_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack(
            [cam.fx * t_cam[:, 0] / z + cam.cx, cam.fy * t_cam[:, 1] / z + cam.cy], axis=1
        )
    return uv, cov2d, z


def project_gaussian(
    cam: CameraModel, mean: np.ndarray, cov3d: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """Single-Gaussian EWA projection. Raises BehindCamera for z <= 1e-4."""
    z = float(cam.to_camera(np.asarray(mean, dtype=np.float64))[2])
    if z <= 1e-4:
        raise BehindCamera(f"camera-frame z = {z:.6g}")
    uv, cov2d, depth = project_gaussians(cam, mean, cov3d)
    return uv[0], cov2d[0], float(depth[0])
