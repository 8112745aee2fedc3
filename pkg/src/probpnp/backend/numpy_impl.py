"""Vectorized NumPy reference implementation of the hot kernels.

The compiled backend (``_native``) mirrors these signatures exactly; parity
tests compare the two. Poses arrive as raw parameter rows:

+ space 1 (yaw only): ``params[b] = [theta]``, translation from ``t_fixed``
+ space 4 (yaw + t):  ``params[b] = [tx, ty, tz, theta]``
+ space 6 (quat + t): ``params[b] = [tx, ty, tz, qw, qx, qy, qz]``

``w2d`` has shape (B, N, 2): each pose row carries its own weights, which
lets hypothesis subsets be expressed as weight masks over a shared point
set (the wrapper broadcasts a single (N, 2) table).

A point is "in front" when its camera-frame depth exceeds ``z_min``; rows
for points behind the camera are zeroed and excluded from the cost. In
strict mode a pose is invalid (cost +inf) as soon as any *counted* point
(nonzero weight) falls behind the camera.
"""
import numpy as np

YAW1, YAW4, QUAT6 = 1, 4, 6


def _rot_y_batch(theta):
    c, s = np.cos(theta), np.sin(theta)
    R = np.zeros(theta.shape + (3, 3))
    R[..., 0, 0] = c
    R[..., 0, 2] = s
    R[..., 1, 1] = 1.0
    R[..., 2, 0] = -s
    R[..., 2, 2] = c
    return R


def _quat_mat_batch(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _pose_arrays(space, params, t_fixed):
    if space == YAW1:
        R = _rot_y_batch(params[:, 0])
        t = np.broadcast_to(t_fixed, (params.shape[0], 3))
    elif space == YAW4:
        R = _rot_y_batch(params[:, 3])
        t = params[:, :3]
    elif space == QUAT6:
        R = _quat_mat_batch(params[:, 3:7])
        t = params[:, :3]
    else:
        raise ValueError(f"unknown space id {space}")
    return R, t


def _geometry(space, params, t_fixed, x3d, x2d, w2d, intr, z_min):
    fx, fy, cx, cy = intr
    R, t = _pose_arrays(space, params, t_fixed)
    xr = np.einsum("bij,nj->bni", R, x3d)
    p = xr + t[:, None, :]
    front = p[..., 2] > z_min
    z = np.where(front, p[..., 2], 1.0)
    u = fx * p[..., 0] / z + cx
    v = fy * p[..., 1] / z + cy
    r = np.stack([u, v], axis=-1) - x2d
    f = w2d * r
    return R, xr, p, z, front, r, f


def _huber_terms(f, delta):
    fn = np.linalg.norm(f, axis=-1)
    active = fn > delta
    rho_prime = np.where(active, delta / np.maximum(fn, 1e-300), 1.0)
    cost_i = np.where(active, delta * fn - 0.5 * delta * delta, 0.5 * fn * fn)
    return fn, rho_prime, cost_i


def cost_batch(space, params, t_fixed, x3d, x2d, w2d, intr, delta, z_min, strict):
    """Robust cost 0.5 sum_i rho(|f_i|^2) for a batch of poses, (B,)."""
    _, _, _, _, front, _, f = _geometry(
        space, params, t_fixed, x3d, x2d, w2d, intr, z_min
    )
    _, _, cost_i = _huber_terms(f, delta)
    cost = np.where(front, cost_i, 0.0).sum(axis=1)
    if strict:
        counted = w2d.sum(axis=-1) > 0.0
        bad = np.any(~front & counted, axis=1)
    else:
        bad = ~np.any(front, axis=1)
    return np.where(bad, np.inf, cost)


def _point_jacobians(space, R, xr, p, z, intr):
    fx, fy, cx, cy = intr
    B, N = z.shape
    d = space
    Pi = np.zeros((B, N, 2, 3))
    z2 = z * z
    Pi[..., 0, 0] = fx / z
    Pi[..., 0, 2] = -fx * p[..., 0] / z2
    Pi[..., 1, 1] = fy / z
    Pi[..., 1, 2] = -fy * p[..., 1] / z2
    G = np.zeros((B, N, 3, d))
    if space == YAW1:
        G[..., 0, 0] = xr[..., 2]
        G[..., 2, 0] = -xr[..., 0]
    else:
        G[..., 0, 0] = 1.0
        G[..., 1, 1] = 1.0
        G[..., 2, 2] = 1.0
        if space == YAW4:
            G[..., 0, 3] = xr[..., 2]
            G[..., 2, 3] = -xr[..., 0]
        else:
            # 2 * skew(R x) for the quaternion tangent columns
            sx, sy, sz = xr[..., 0], xr[..., 1], xr[..., 2]
            G[..., 0, 4] = -2.0 * sz
            G[..., 0, 5] = 2.0 * sy
            G[..., 1, 3] = 2.0 * sz
            G[..., 1, 5] = -2.0 * sx
            G[..., 2, 3] = -2.0 * sy
            G[..., 2, 4] = 2.0 * sx
    return Pi, G


def build_system_batch(space, params, t_fixed, x3d, x2d, w2d, intr, delta, z_min):
    """Rescaled residual stack and Jacobian for each pose in the batch.

    Returns ``(F, J, cost, n_valid)`` with shapes (B, 2N), (B, 2N, d), (B,),
    (B,). Rows of behind-camera points are zero; the cost counts in-front
    points only.
    """
    R, xr, p, z, front, r, f = _geometry(
        space, params, t_fixed, x3d, x2d, w2d, intr, z_min
    )
    _, rho_prime, cost_i = _huber_terms(f, delta)
    B, N = front.shape
    d = space
    Pi, G = _point_jacobians(space, R, xr, p, z, intr)
    J_pt = np.einsum("bnij,bnjk->bnik", Pi, G) * w2d[..., None]
    s = np.sqrt(rho_prime) * front
    F = (f * s[..., None]).reshape(B, 2 * N)
    J = (J_pt * s[..., None, None]).reshape(B, 2 * N, d)
    cost = np.where(front, cost_i, 0.0).sum(axis=1)
    n_valid = front.sum(axis=1)
    cost = np.where(n_valid == 0, np.inf, cost)
    return F, J, cost, n_valid


def corr_grad_batch(space, params, weights, t_fixed, x3d, x2d, w2d, intr, delta, z_min):
    """Weight-accumulated gradients of the per-point robust cost.

    For pose batch b with scalar weights ``weights[b]`` (callers pass
    normalized importance weights, zero for invalid poses), accumulates
    ``sum_b weights[b] * d c_i(y_b) / d(.)`` for every point i. Also
    accumulates ``er2[i] = sum_b weights[b] * rho'_i r_i^o2`` which is the
    posterior-expectation factor in the weight-gradient balance.

    Returns ``(gx3d (N,3), gx2d (N,2), gw2d (N,2), er2 (N,2))``.
    """
    R, xr, p, z, front, r, f = _geometry(
        space, params, t_fixed, x3d, x2d, w2d, intr, z_min
    )
    _, rho_prime, _ = _huber_terms(f, delta)
    uw = weights[:, None] * front
    g_f = rho_prime[..., None] * f
    wg = w2d * g_f
    gx2d = -np.einsum("bn,bnc->nc", uw, wg)
    gw2d = np.einsum("bn,bnc->nc", uw, g_f * r)
    er2 = np.einsum("bn,bnc->nc", uw, rho_prime[..., None] * r * r)
    fx, fy, cx, cy = intr
    z2 = z * z
    # v = Pi^T (w * g_f), written out to skip materializing Pi
    v0 = fx / z * wg[..., 0]
    v1 = fy / z * wg[..., 1]
    v2 = -(fx * p[..., 0] * wg[..., 0] + fy * p[..., 1] * wg[..., 1]) / z2
    vcam = np.stack([v0, v1, v2], axis=-1)
    gx3d = np.einsum("bn,bkj,bnk->nj", uw, R, vcam)
    return gx3d, gx2d, gw2d, er2
