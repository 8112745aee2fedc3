"""Correspondence-learning losses on top of the solver and sampler.

The KL loss splits into ``l_tgt`` (robust reprojection cost at the target
pose, the Dirac-target term) and ``l_pred`` (log normalizer of the pose
likelihood, estimated by AMIS or, for yaw-only problems, by dense
quadrature). Its gradient w.r.t. every correspondence parameter is the
cost gradient at the target minus the posterior expectation of cost
gradients, both produced by the same batched kernel.

``reg_loss`` differentiates a pose-error loss through one Gauss-Newton
step taken from the detached solution: with ``A dy = -g`` at fixed y*,
``d(dy) = -A^{-1} (dA dy + dg)``, so the backward pass only needs two
adjoint vectors against the per-point row derivatives of the rescaled
system.

``WeightHead`` maps free logits to nonnegative weights; the softmax form
bounds each channel's total weight by its global scale, which is what
keeps the likelihood from being driven arbitrarily sharp during learning.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import logsumexp

from . import backend
from .errors import DegenerateSet, SingularSystem
from .geometry import (
    SPACE_QUAT6,
    SPACE_YAW1,
    SPACE_YAW4,
    Z_MIN,
    CorrGrads,
    pose_point_jacobian,
    proj_jacobian,
    quat_tangent_basis,
)
from .mc import McConfig, amis, log_likelihood, yaw_grid_loglik
from .solver import SolverOptions, adaptive_delta, solve_guarded


@dataclass(frozen=True)
class LossReport:
    """KL loss value, its two terms, and per-point parameter gradients.

    ``l_kl`` is stored as the literal sum ``l_tgt + l_pred``. ``batch``
    and ``solve`` carry the sampling byproducts for reuse (weight-balance
    inspection, scoring) when the Monte Carlo integrator ran.
    """

    l_tgt: float
    l_pred: float
    l_kl: float
    grads: CorrGrads
    l_reg: float = None
    batch: object = None
    solve: object = None


@dataclass(frozen=True)
class WeightBalance:
    """The two opposing terms of the weight gradient, and their sum.

    Stored in the descent-direction convention (-dL/dw): ``uncertainty``
    (nonpositive, large target-pose residuals push a weight down) plus
    ``discrimination`` (nonnegative, residual spread over the posterior
    pushes it up) add up to ``total``.
    """

    uncertainty: np.ndarray
    discrimination: np.ndarray
    total: np.ndarray


@dataclass(frozen=True)
class RegReport:
    l_reg: float
    l_pos: float
    l_orient: float
    step: np.ndarray
    pose_plus: object
    grads: CorrGrads
    solve: object = None


@dataclass(frozen=True)
class WeightHead:
    """Free parameters producing the N x 2 correspondence weights.

    kind="softmax": w[i, c] = exp(log_scale[c]) * softmax_i(logits[:, c]),
    so each channel's weights sum to exp(log_scale[c]). kind="exp" drops
    the normalizer (the known-unstable ablation variant).
    """

    logits: np.ndarray
    log_scale: np.ndarray
    kind: str = "softmax"

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        scale = np.asarray(self.log_scale, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[1] != 2:
            raise ValueError(f"logits must have shape (N, 2), got {logits.shape}")
        if scale.shape != (2,):
            raise ValueError(f"log_scale must have shape (2,), got {scale.shape}")
        if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(scale))):
            raise ValueError("weight head parameters must be finite")
        if self.kind not in ("softmax", "exp"):
            raise ValueError(f"kind must be softmax|exp, got {self.kind!r}")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "log_scale", scale)


def weight_head(head):
    """Forward map from head parameters to the (N, 2) weight table."""
    if head.kind == "exp":
        return np.exp(head.logits + head.log_scale)
    z = head.logits - head.logits.max(axis=0)
    e = np.exp(z)
    return np.exp(head.log_scale) * e / e.sum(axis=0)


def head_grads(head, g_w2d):
    """Backprop dL/dw2d through the head: returns (d_logits, d_log_scale)."""
    w = weight_head(head)
    gw = np.asarray(g_w2d, dtype=np.float64) * w
    col = gw.sum(axis=0)
    if head.kind == "exp":
        return gw, col
    sm = w * np.exp(-head.log_scale)
    return gw - sm * col, col


def _corr_grads(X, space, params, weights, t_fixed, delta):
    gx3d, gx2d, gw2d, er2 = backend.corr_grad_batch(
        space, params, np.asarray(weights, dtype=np.float64), t_fixed,
        X.x3d, X.x2d, X.w2d, X.camera.intr, delta, Z_MIN,
    )
    return CorrGrads(gx3d, gx2d, gw2d), er2


def reprojection_loss(X, y_gt, delta=None):
    """Robust reprojection cost at a fixed pose, with parameter gradients.

    The target-pose term of the KL loss on its own. As a training
    objective it has a trivial minimum at w2d -> 0, so it serves as the
    baseline that the normalizer term exists to fix. Returns
    ``(value, CorrGrads)``; the value is +inf when a counted point sits
    behind the camera (the gradients stay finite, behind rows masked).
    """
    space = y_gt.space
    t_fixed = y_gt.t_fixed if space == SPACE_YAW1 else None
    if delta is None:
        delta = adaptive_delta(X) if np.any(X.w2d > 0) else 0.0
    value = -log_likelihood(X, y_gt, delta)
    grads, _ = _corr_grads(X, space, y_gt.params[None], np.ones(1), t_fixed, delta)
    return value, grads


def kl_loss(X, y_gt, cfg=None, opts=None, integrator="amis", n_grid=16384):
    """KL pose loss at a Dirac target, with per-point parameter gradients.

    integrator="amis" seeds AMIS with a guarded solve (everything derived
    from cfg.seed, so calls are reproducible); "quadrature" integrates on
    the dense yaw grid instead and is exact up to grid resolution
    (yaw-only pose spaces). The target pose must keep every counted point
    in front of the camera.
    """
    if not np.any(X.w2d > 0):
        raise DegenerateSet(
            "all correspondence weights are zero: the likelihood is flat and "
            "its normalizer over translations is unbounded"
        )
    cfg = cfg or McConfig()
    delta = adaptive_delta(X)
    space = y_gt.space
    t_fixed = y_gt.t_fixed if space == SPACE_YAW1 else None
    l_tgt = -log_likelihood(X, y_gt, delta)
    gt_grads, _ = _corr_grads(X, space, y_gt.params[None], np.ones(1), t_fixed, delta)
    batch = None
    solve = None
    if integrator == "quadrature":
        if space != SPACE_YAW1:
            raise ValueError("quadrature integration needs a yaw-only pose")
        thetas, ll = yaw_grid_loglik(X, t_fixed, n_grid, delta)
        log_z = logsumexp(ll)
        l_pred = float(log_z + math.log(2.0 * np.pi / n_grid))
        post = np.exp(ll - log_z)
        e_grads, _ = _corr_grads(X, space, thetas[:, None], post, t_fixed, delta)
    elif integrator == "amis":
        solve = solve_guarded(X, y_gt, opts, rng=np.random.default_rng([cfg.seed, 1]))
        batch = amis(X, solve, cfg)
        l_pred = batch.l_pred
        e_grads, _ = _corr_grads(
            X, space, batch.params, batch.normalized_weights(), t_fixed, delta
        )
    else:
        raise ValueError(f"integrator must be amis|quadrature, got {integrator!r}")
    grads = CorrGrads(
        gt_grads.x3d - e_grads.x3d,
        gt_grads.x2d - e_grads.x2d,
        gt_grads.w2d - e_grads.w2d,
    )
    return LossReport(l_tgt, l_pred, l_tgt + l_pred, grads, batch=batch, solve=solve)


def grad_weights(X, y_gt, batch):
    """Split the weight gradient into its opposing posterior terms.

    In the -dL/dw convention: uncertainty = -w * rho' r^o2 at the target
    pose, discrimination = w * E[rho' r^o2] under the sample batch. Where
    the robust kernel is inactive these are the plain squared-residual
    brackets.
    """
    delta = adaptive_delta(X)
    space = y_gt.space
    t_fixed = y_gt.t_fixed if space == SPACE_YAW1 else None
    _, er2_gt = _corr_grads(X, space, y_gt.params[None], np.ones(1), t_fixed, delta)
    _, er2_post = _corr_grads(
        X, batch.space, batch.params, batch.normalized_weights(), batch.t_fixed, delta
    )
    uncertainty = -X.w2d * er2_gt
    discrimination = X.w2d * er2_post
    return WeightBalance(uncertainty, discrimination, uncertainty + discrimination)


def smooth_l1(d, beta):
    """Quadratic inside beta, linear outside, C1 at the joint."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    d = abs(float(d))
    if d <= beta:
        return 0.5 * d * d / beta
    return d - 0.5 * beta


def _dproj(intr, p_cam, dp, h):
    """Directional derivative of the projection Jacobian: (D_Pi[dp]) @ h."""
    fx, fy, _, _ = intr
    x, y, z = p_cam
    dx, dy, dz = dp
    z2 = z * z
    z3 = z2 * z
    row0 = -fx * dz * h[0] / z2 + (-fx * dx / z2 + 2.0 * fx * x * dz / z3) * h[2]
    row1 = -fy * dz * h[1] / z2 + (-fy * dy / z2 + 2.0 * fy * y * dz / z3) * h[2]
    return np.array([row0, row1])


def _rot_col_derivative(pose, k, vec):
    """(dG_k) @ vec for the rotation block of the point Jacobian.

    G's rotation columns are linear in the 3D point, so their derivative
    w.r.t. coordinate k is G's rotation block evaluated at e_k.
    """
    R = pose.R
    if pose.space == SPACE_QUAT6:
        return 2.0 * np.cross(R[:, k], vec[3:])
    col = np.array([R[2, k], 0.0, -R[0, k]])
    return col * vec[-1]


def reg_loss(X, y_gt, opts=None, beta=1.0, solve=None, rng=None):
    """Pose-error loss through one Gauss-Newton step from the detached solve.

    Position error enters as a smooth L1 on the Euclidean distance
    (threshold ``beta``); orientation as 1 - cos for yaw and as the
    antipodally symmetric 2 - 2 (l^T l_gt)^2 for quaternions. The solution
    y* is a constant: gradients flow only through the step.
    """
    opts = opts or SolverOptions()
    if solve is None:
        solve = solve_guarded(X, y_gt, opts, rng=rng)
    y_star = solve.pose_star
    delta = solve.delta
    space = y_star.space
    dof = y_star.dof
    n = len(X)
    cam = X.camera
    intr = cam.intr
    R = y_star.R

    p_cam = X.x3d @ R.T + y_star.t
    front = p_cam[:, 2] > Z_MIN
    s = np.zeros(n)
    f = np.zeros((n, 2))
    rr = np.zeros((n, 2))
    J = np.zeros((n, 2, dof))
    P = np.zeros((n, 2, dof))  # unweighted Pi @ G
    Pi = np.zeros((n, 2, 3))
    G = np.zeros((n, 3, dof))
    active = np.zeros(n, dtype=bool)
    for i in range(n):
        if not front[i]:
            continue
        z = p_cam[i, 2]
        proj = np.array([intr[0] * p_cam[i, 0] / z + intr[2],
                         intr[1] * p_cam[i, 1] / z + intr[3]])
        rr[i] = proj - X.x2d[i]
        f[i] = X.w2d[i] * rr[i]
        Pi[i] = proj_jacobian(cam, p_cam[i])
        G[i] = pose_point_jacobian(y_star, X.x3d[i])
        P[i] = Pi[i] @ G[i]
        J[i] = X.w2d[i][:, None] * P[i]
        nf = float(np.linalg.norm(f[i]))
        active[i] = nf > delta
        s[i] = 1.0 if not active[i] else math.sqrt(delta / nf)

    Js = s[:, None, None] * J
    Fs = s[:, None] * f
    rows_J = Js.reshape(2 * n, dof)
    rows_F = Fs.reshape(2 * n)
    A = rows_J.T @ rows_J + opts.eps * np.eye(dof)
    g = rows_J.T @ rows_F
    try:
        chol = cho_factor(A)
    except LinAlgError:
        raise SingularSystem(
            "normal equations of the regularization step are not factorizable"
        ) from None
    dy = -cho_solve(chol, g)
    pose_plus = y_star.retract(dy)

    # loss head on the stepped pose
    dL_ddy = np.zeros(dof)
    u = pose_plus.t - y_gt.t
    dist = float(np.linalg.norm(u))
    l_pos = smooth_l1(dist, beta)
    if space != SPACE_YAW1 and dist > 0.0:
        slope = dist / beta if dist <= beta else 1.0
        dL_ddy[:3] = slope * u / dist
    if space == SPACE_QUAT6:
        T = quat_tangent_basis(y_star.q)
        l_plus = y_star.q + T @ dy[3:]
        nrm = float(np.linalg.norm(l_plus))
        lhat = l_plus / nrm
        c = float(lhat @ y_gt.q)
        l_orient = 2.0 - 2.0 * c * c
        dL_ddy[3:] = -4.0 * c / nrm * (T.T @ y_gt.q - c * (T.T @ lhat))
    else:
        theta_plus = y_star.theta + dy[-1]
        d_theta = theta_plus - y_gt.theta
        l_orient = 1.0 - math.cos(d_theta)
        dL_ddy[-1] = math.sin(d_theta)

    v = cho_solve(chol, dL_ddy)
    gx3d = np.zeros((n, 3))
    gx2d = np.zeros((n, 2))
    gw2d = np.zeros((n, 2))
    for i in range(n):
        if not front[i]:
            continue
        a1 = Js[i] @ dy + Fs[i]
        a2 = Js[i] @ v
        Jv = J[i] @ v
        Jd = J[i] @ dy
        S0 = float(a1 @ Jv + a2 @ (Jd + f[i]))
        u2 = s[i] * a2
        if active[i]:
            nf2 = float(f[i] @ f[i])
            u2 = u2 - S0 * s[i] / (2.0 * nf2) * f[i]
        # x2d: df = -w_c e_c, dJ = 0, so dL = -(u2 . df) = w_c u2_c
        gx2d[i] = X.w2d[i] * u2
        # w2d: df = rr_c e_c, dJ selects row c of P
        Pv = P[i] @ v
        Pd = P[i] @ dy
        gw2d[i] = -(s[i] * (a1 * Pv + a2 * Pd) + u2 * rr[i])
        # x3d: df = w * (Pi R[:,k]), dJ = diag(w)(dPi_k G + Pi dG_k)
        wa1 = X.w2d[i] * a1
        wa2 = X.w2d[i] * a2
        Gv = G[i] @ v
        Gd = G[i] @ dy
        for k in range(3):
            dirk = R[:, k]
            dJv = _dproj(intr, p_cam[i], dirk, Gv) + Pi[i] @ _rot_col_derivative(
                y_star, k, v
            )
            dJd = _dproj(intr, p_cam[i], dirk, Gd) + Pi[i] @ _rot_col_derivative(
                y_star, k, dy
            )
            df = X.w2d[i] * (Pi[i] @ dirk)
            gx3d[i, k] = -(s[i] * (wa1 @ dJv + wa2 @ dJd) + u2 @ df)
    l_reg = l_pos + l_orient
    return RegReport(
        l_reg, l_pos, l_orient, dy, pose_plus,
        CorrGrads(gx3d, gx2d, gw2d), solve=solve,
    )
