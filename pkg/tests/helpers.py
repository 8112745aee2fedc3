"""Shared oracles and fixture builders for the test suite.

The finite-difference helpers are the independent oracles for every
analytic derivative in the package: they evaluate the public forward
functions only (never the Jacobian code under test) with a central stencil.
The Huber threshold is always held fixed while differentiating, matching
the solver's freeze-per-solve contract.
"""
import numpy as np

from probpnp.geometry import (
    Camera,
    Correspondence,
    CorrespondenceSet,
    Quat6DoF,
    SPACE_QUAT6,
    SPACE_YAW1,
    SPACE_YAW4,
    Yaw4DoF,
    YawOnly,
    project,
    transform,
)
from probpnp.solver import huber

DEFAULT_CAM = Camera(500.0, 500.0, 320.0, 240.0)


def fd_jacobian(fun, x, h=1e-6):
    """Central-difference Jacobian of a vector function, one column per input."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def fd_grad(fun, x, h=1e-6):
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (fun(x + e) - fun(x - e)) / (2.0 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def robust_cost(X, pose, delta):
    """Oracle for the solver objective: 1/2 sum_i rho(|f_i|^2), direct loop."""
    total = 0.0
    for c in X.points:
        r = project(X.camera, transform(pose, c.x3d)) - c.x2d
        f = c.w2d * r
        total += 0.5 * huber(float(f @ f), delta)
    return total


def random_pose(rng, space, t_fixed=None):
    if space == SPACE_YAW1:
        return YawOnly(rng.uniform(-np.pi, np.pi), t_fixed)
    t = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3), rng.uniform(3.0, 6.0)])
    if space == SPACE_YAW4:
        return Yaw4DoF(t, rng.uniform(-np.pi, np.pi))
    q = rng.normal(size=4)
    return Quat6DoF(t, q / np.linalg.norm(q))


def make_instance(rng, space, n=8, noise=0.0, outlier_px=0.0, weight_mode="uniform"):
    """Random well-conditioned instance: (X, gt_pose).

    ``noise`` is Gaussian pixel noise on every observation; ``outlier_px``
    additionally shifts two observations by that many pixels (to activate
    the Huber kernel). ``weight_mode`` is ``uniform`` or ``random``.
    """
    cam = DEFAULT_CAM
    x3d = rng.uniform(-0.25, 0.25, (n, 3))
    gt = random_pose(rng, space, t_fixed=np.array([0.0, 0.0, 4.0]))
    pts = []
    for i in range(n):
        uv = project(cam, transform(gt, x3d[i]))
        uv = uv + rng.normal(scale=noise, size=2) if noise else uv
        if outlier_px and i < 2:
            uv = uv + outlier_px * np.array([1.0, -0.5])
        if weight_mode == "random":
            w = rng.uniform(0.2, 2.0, size=2)
        else:
            w = np.ones(2)
        pts.append(Correspondence(x3d[i], uv, w))
    return CorrespondenceSet(tuple(pts), cam), gt


def four_fold_set(t=(0.0, 0.0, 4.0), w=1.0, base=None, cam=None):
    """Yaw-only set whose likelihood is exactly 4-fold symmetric.

    Each observed pixel is associated with all four 90-degree object-frame
    rotations of its 3D point (equal weight), the way an orientation-blind
    correspondence model spreads a symmetric object's mass. Rotating the
    pose by 90 degrees then permutes the residual terms, so
    cost(theta) == cost(theta + k*pi/2) exactly.

    Returns (X, t_fixed).
    """
    cam = cam or DEFAULT_CAM
    t = np.asarray(t, dtype=np.float64)
    if base is None:
        base = np.array([[0.25, 0.12, 0.1], [-0.1, -0.08, 0.3]])
    rot90 = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
    pts = []
    for b in base:
        uv = project(cam, b + t)
        x = b.copy()
        for _ in range(4):
            pts.append(Correspondence(x, uv, np.full(2, w)))
            x = rot90 @ x
    return CorrespondenceSet(tuple(pts), cam), t
