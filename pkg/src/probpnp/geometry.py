"""Camera model, pose parameterizations, reprojection residuals and Jacobians.

Conventions
-----------
+ Camera frame: x right, y down, z forward (optical axis). Points must have
  z above a small floor (``Z_MIN``) to project; otherwise `BehindCamera`.
+ Yaw rotates about the camera Y axis, so the ground plane is XZ. With
  ``c = cos(theta), s = sin(theta)``::

      R_y(theta) = [[ c, 0, s],
                    [ 0, 1, 0],
                    [-s, 0, c]]

+ Quaternions are scalar-first ``(w, x, y, z)`` and kept unit-norm. The
  local tangent parameterization of a quaternion pose is a 3-vector ``u``
  with retraction ``q(u) = normalize(q + T(q) u)`` where ``T(q)`` is the
  4x3 basis returned by `quat_tangent_basis`; its columns are orthonormal
  and orthogonal to ``q``.
+ Local pose parameters are ordered translation-first: ``[t, rot]``. The
  pose DoF is 1 (yaw only), 4 (yaw + translation) or 6 (quaternion
  tangent + translation).
+ Units: meters for 3D, pixels for 2D, radians for angles. The 2D weights
  ``w2d`` multiply pixel residuals elementwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera

Z_MIN = 1e-4

SPACE_YAW1 = "yaw1"
SPACE_YAW4 = "yaw4"
SPACE_QUAT6 = "quat6"
SPACES = (SPACE_YAW1, SPACE_YAW4, SPACE_QUAT6)

# minimum point count for a well-posed solve, per pose space
MIN_POINTS = {SPACE_YAW1: 2, SPACE_YAW4: 2, SPACE_QUAT6: 4}


def _as_vec(x, n, name):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite, got {a}")
    a = a.copy()
    a.flags.writeable = False
    return a


def normalize_angle(theta):
    """Wrap an angle (or array of angles) to ``[-pi, pi)``."""
    return np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi


def rot_y(theta):
    """Rotation matrix about the camera Y axis."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def skew(v):
    """Cross-product matrix: ``skew(v) @ u == cross(v, u)``."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def quat_to_mat(q):
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_axis_angle(axis, angle):
    """Unit quaternion for a rotation of ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("axis must be nonzero")
    half = 0.5 * angle
    return np.concatenate(([math.cos(half)], math.sin(half) / n * axis))


def quat_tangent_basis(q):
    """4x3 orthonormal basis of the tangent space of S^3 at ``q``.

    Each column b_k satisfies ``b_k . q = 0``; the retraction
    ``normalize(q + T u)`` equals left-multiplication of ``q`` by the unit
    quaternion ``(1, -u) / sqrt(1 + |u|^2)``, so the rotated-point Jacobian
    along ``u`` is ``2 skew(R x)`` (see `_rot_point_jac_quat`).
    """
    w, x, y, z = q
    return np.array(
        [
            [x, y, z],
            [-w, -z, y],
            [z, -w, -x],
            [-y, x, -w],
        ]
    )


def quat_angle(qa, qb):
    """Angular distance in radians between two unit quaternions.

    Antipodal pairs represent the same rotation, so the dot product is
    folded by absolute value.
    """
    d = abs(float(np.dot(qa, qb)))
    return 2.0 * math.acos(min(1.0, d))


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics (focal lengths and principal point, in pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"camera intrinsics must be finite, got {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def intr(self):
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass(frozen=True)
class YawOnly:
    """1-DoF pose: yaw about camera Y at a fixed translation."""

    theta: float
    t_fixed: np.ndarray

    space = SPACE_YAW1
    dof = 1

    def __post_init__(self):
        object.__setattr__(self, "theta", float(normalize_angle(self.theta)))
        object.__setattr__(self, "t_fixed", _as_vec(self.t_fixed, 3, "t_fixed"))

    @property
    def t(self):
        return self.t_fixed

    @property
    def R(self):
        return rot_y(self.theta)

    @property
    def params(self):
        return np.array([self.theta])

    def retract(self, dy):
        dy = np.asarray(dy, dtype=np.float64)
        return YawOnly(self.theta + dy[0], self.t_fixed)


@dataclass(frozen=True)
class Yaw4DoF:
    """4-DoF pose: translation plus yaw about camera Y."""

    t: np.ndarray
    theta: float

    space = SPACE_YAW4
    dof = 4

    def __post_init__(self):
        object.__setattr__(self, "t", _as_vec(self.t, 3, "t"))
        object.__setattr__(self, "theta", float(normalize_angle(self.theta)))

    @property
    def R(self):
        return rot_y(self.theta)

    @property
    def params(self):
        return np.concatenate([self.t, [self.theta]])

    def retract(self, dy):
        dy = np.asarray(dy, dtype=np.float64)
        return Yaw4DoF(self.t + dy[:3], self.theta + dy[3])


@dataclass(frozen=True)
class Quat6DoF:
    """6-DoF pose: translation plus unit quaternion ``(w, x, y, z)``."""

    t: np.ndarray
    q: np.ndarray

    space = SPACE_QUAT6
    dof = 6

    def __post_init__(self):
        object.__setattr__(self, "t", _as_vec(self.t, 3, "t"))
        q = np.asarray(self.q, dtype=np.float64)
        if q.shape != (4,):
            raise ValueError(f"q must have shape (4,), got {q.shape}")
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-8:
            raise ValueError(f"q must have norm near 1, got {q}")
        q = q / n
        q.flags.writeable = False
        object.__setattr__(self, "q", q)

    @property
    def R(self):
        return quat_to_mat(self.q)

    @property
    def params(self):
        return np.concatenate([self.t, self.q])

    def retract(self, dy):
        dy = np.asarray(dy, dtype=np.float64)
        q = self.q + quat_tangent_basis(self.q) @ dy[3:]
        return Quat6DoF(self.t + dy[:3], q)


Pose = YawOnly | Yaw4DoF | Quat6DoF


def pose_from_params(space, params, t_fixed=None):
    """Rebuild a pose from its parameter vector (see each pose's ``params``)."""
    params = np.asarray(params, dtype=np.float64)
    if space == SPACE_YAW1:
        if t_fixed is None:
            raise ValueError("yaw1 pose needs t_fixed")
        return YawOnly(params[0], t_fixed)
    if space == SPACE_YAW4:
        return Yaw4DoF(params[:3], params[3])
    if space == SPACE_QUAT6:
        return Quat6DoF(params[:3], params[3:])
    raise ValueError(f"unknown pose space {space!r}")


def rotation_distance(pose_a, pose_b):
    """Rotation error in radians between two poses of the same space."""
    if pose_a.space != pose_b.space:
        raise ValueError(f"pose spaces differ: {pose_a.space} vs {pose_b.space}")
    if pose_a.space == SPACE_QUAT6:
        return quat_angle(pose_a.q, pose_b.q)
    return abs(float(normalize_angle(pose_a.theta - pose_b.theta)))


def translation_distance(pose_a, pose_b):
    return float(np.linalg.norm(pose_a.t - pose_b.t))


@dataclass(frozen=True)
class Correspondence:
    """One 2D-3D point pair with its elementwise 2D weight."""

    x3d: np.ndarray
    x2d: np.ndarray
    w2d: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x3d", _as_vec(self.x3d, 3, "x3d"))
        object.__setattr__(self, "x2d", _as_vec(self.x2d, 2, "x2d"))
        w = _as_vec(self.w2d, 2, "w2d")
        if np.any(w < 0):
            raise ValueError(f"w2d must be non-negative, got {w}")
        object.__setattr__(self, "w2d", w)


@dataclass(frozen=True)
class CorrespondenceSet:
    """A bag of correspondences plus the camera observing them.

    Stacked array views (``x3d``, ``x2d``, ``w2d``) are precomputed for the
    batch kernels. Zero-weight sets are representable (they have a flat
    likelihood); operations that need weight mass or 2D spread raise
    `DegenerateSet` themselves.
    """

    points: tuple
    camera: Camera
    x3d: np.ndarray = field(init=False, repr=False, compare=False)
    x2d: np.ndarray = field(init=False, repr=False, compare=False)
    w2d: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = tuple(self.points)
        if len(pts) == 0:
            raise ValueError("correspondence set must not be empty")
        object.__setattr__(self, "points", pts)
        for name in ("x3d", "x2d", "w2d"):
            arr = np.stack([getattr(p, name) for p in pts])
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.points)

    @classmethod
    def from_arrays(cls, x3d, x2d, w2d, camera):
        x3d = np.asarray(x3d, dtype=np.float64)
        x2d = np.asarray(x2d, dtype=np.float64)
        w2d = np.asarray(w2d, dtype=np.float64)
        pts = tuple(
            Correspondence(x3d[i], x2d[i], w2d[i]) for i in range(x3d.shape[0])
        )
        return cls(pts, camera)

    def replace(self, x3d=None, x2d=None, w2d=None):
        """Copy with some arrays swapped out (used by learning loops)."""
        return CorrespondenceSet.from_arrays(
            self.x3d if x3d is None else x3d,
            self.x2d if x2d is None else x2d,
            self.w2d if w2d is None else w2d,
            self.camera,
        )


def transform(pose, x3d):
    """Map an object-space point into the camera frame: ``R x + t``."""
    return pose.R @ np.asarray(x3d, dtype=np.float64) + pose.t


def project(camera, p_cam, z_min=Z_MIN):
    """Pinhole projection to pixels; raises `BehindCamera` if z <= z_min."""
    x, y, z = p_cam
    if z <= z_min:
        raise BehindCamera(z, z_min)
    return np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy])


def residual(pose, corr, camera, z_min=Z_MIN):
    """Reprojection residual ``r`` and its weighted form ``f = w2d * r``."""
    r = project(camera, transform(pose, corr.x3d), z_min) - corr.x2d
    return r, corr.w2d * r


def proj_jacobian(camera, p_cam):
    """Jacobian of the pinhole projection w.r.t. the camera-frame point."""
    x, y, z = p_cam
    return np.array(
        [
            [camera.fx / z, 0.0, -camera.fx * x / z**2],
            [0.0, camera.fy / z, -camera.fy * y / z**2],
        ]
    )


def _rot_point_jac_quat(R, x3d):
    # d(R(q(u)) x)/du at u = 0 for the tangent retraction above
    return 2.0 * skew(R @ x3d)


def pose_point_jacobian(pose, x3d):
    """Jacobian of the camera-frame point w.r.t. the local pose parameters.

    Shape (3, dof), columns ordered like the retraction input.
    """
    R = pose.R
    if pose.space == SPACE_YAW1:
        xr = R @ x3d
        return np.array([[xr[2]], [0.0], [-xr[0]]])
    if pose.space == SPACE_YAW4:
        xr = R @ x3d
        G = np.zeros((3, 4))
        G[:, :3] = np.eye(3)
        G[:, 3] = (xr[2], 0.0, -xr[0])
        return G
    G = np.zeros((3, 6))
    G[:, :3] = np.eye(3)
    G[:, 3:] = _rot_point_jac_quat(R, x3d)
    return G


def jac_pose(pose, corr, camera, z_min=Z_MIN):
    """Jacobian of the weighted residual ``f`` w.r.t. the local pose parameters.

    Shape (2, dof). Raises `BehindCamera` like `residual`.
    """
    p_cam = transform(pose, corr.x3d)
    if p_cam[2] <= z_min:
        raise BehindCamera(p_cam[2], z_min)
    Pi = proj_jacobian(camera, p_cam)
    G = pose_point_jacobian(pose, corr.x3d)
    return corr.w2d[:, None] * (Pi @ G)


def _rho_prime(norm_f, delta):
    # derivative of the Huber kernel rho(s) w.r.t. s = |f|^2, as a factor
    return 1.0 if norm_f <= delta else delta / norm_f


@dataclass(frozen=True)
class CorrGrads:
    """Gradients of one point's robust cost ``c = 0.5 rho(|f|^2)``."""

    x3d: np.ndarray
    x2d: np.ndarray
    w2d: np.ndarray


def jac_correspondence(pose, corr, camera, delta, z_min=Z_MIN):
    """Gradients of ``c_i = 0.5 rho(|f_i|^2)`` w.r.t. x3d, x2d and w2d.

    The Huber factor rho' is folded in, so the same chain rule serves both
    the solver and the learning losses. ``delta`` is treated as a constant
    (no gradient flows through the adaptive threshold).
    """
    p_cam = transform(pose, corr.x3d)
    if p_cam[2] <= z_min:
        raise BehindCamera(p_cam[2], z_min)
    r = project(camera, p_cam, z_min) - corr.x2d
    f = corr.w2d * r
    rp = _rho_prime(float(np.linalg.norm(f)), delta)
    # dc/df = rho' f, then chain into each leaf
    g_f = rp * f
    Pi = proj_jacobian(camera, p_cam)
    g_x3d = pose.R.T @ (Pi.T @ (corr.w2d * g_f))
    g_x2d = -corr.w2d * g_f
    g_w2d = g_f * r
    return CorrGrads(g_x3d, g_x2d, g_w2d)
