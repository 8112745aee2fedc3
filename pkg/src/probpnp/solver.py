"""Robustified weighted-PnP solving.

The solver minimizes the robust reprojection cost

    E(y) = 1/2 sum_i rho(|f_i(y)|^2),   f_i = w2d_i o (proj(R x3d_i + t) - x2d_i)

where rho is the Huber kernel with a threshold chosen adaptively from the
correspondence set (`adaptive_delta`) and frozen for the whole solve. The
damped least-squares step is

    dy = -(J'J + lambda D^2)^{-1} J'F,    D^2 = diag(J'J)

on the rescaled system (rows multiplied by sqrt(rho')), with a simple
multiplicative trust region: accepted steps divide lambda by ``tr_grow``,
rejected ones multiply it by ``tr_shrink``. A fast Gauss-Newton mode damps
with ``eps I`` instead and takes every step.

Initialization mirrors RANSAC: ``M`` weighted point subsets are drawn
without replacement, each polished for a few LM iterations from a canonical
seed pose, and the hypothesis with the best full-set log-likelihood wins.
Behind-camera points contribute zero rows while iterating but make a
hypothesis score -inf, so physically invalid hypotheses always lose.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import backend
from .errors import (
    AllPointsInvalid,
    DegenerateSet,
    NoValidHypothesis,
    SingularSystem,
)
from .geometry import (
    MIN_POINTS,
    SPACE_QUAT6,
    SPACE_YAW1,
    SPACE_YAW4,
    Z_MIN,
    normalize_angle,
    pose_from_params,
)
from .utils import thread_count

_STEP_TOL = 1e-10
_LAMBDA_MAX = 1e32
_LAMBDA_MIN = 1e-12
_DIAG_FLOOR = 1e-12
_DOF = {SPACE_YAW1: 1, SPACE_YAW4: 4, SPACE_QUAT6: 6}


@dataclass(frozen=True)
class SolverOptions:
    """Tuning knobs shared by all solver entry points.

    ``delta_rel`` scales the adaptive Huber threshold, ``eps`` is the
    Gauss-Newton / covariance damping floor, ``lambda_init`` the starting LM
    damping, ``tr_grow``/``tr_shrink`` the trust-region factors. ``M``
    subsets of ``n_sub`` points are drawn during random-sampling
    initialization and each is polished for ``init_iters`` LM iterations.
    """

    delta_rel: float = 1.0
    eps: float = 1e-5
    max_iter: int = 10
    lambda_init: float = 1e-4
    tr_grow: float = 2.0
    tr_shrink: float = 3.0
    M: int = 64
    n_sub: int = 4
    init_iters: int = 3

    def __post_init__(self):
        if not (self.delta_rel > 0 and math.isfinite(self.delta_rel)):
            raise ValueError(f"delta_rel must be positive, got {self.delta_rel}")
        if not (self.eps > 0 and math.isfinite(self.eps)):
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if not (self.lambda_init > 0):
            raise ValueError(f"lambda_init must be positive, got {self.lambda_init}")
        if not (self.tr_grow > 1 and self.tr_shrink > 1):
            raise ValueError("trust-region factors must exceed 1")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.n_sub < 3:
            raise ValueError(f"n_sub must be >= 3, got {self.n_sub}")
        if self.init_iters < 1:
            raise ValueError(f"init_iters must be >= 1, got {self.init_iters}")


@dataclass(frozen=True)
class SolveResult:
    """Solver output: optimum, local covariance, and iteration bookkeeping.

    ``cost_trace`` records the robust cost at the init and after every
    accepted step (accepted steps never increase it). ``delta`` is the
    Huber threshold the solve was run with, for downstream likelihood
    evaluation.
    """

    pose_star: object
    covariance: np.ndarray
    cost: float
    converged: bool
    iterations: int
    delta: float
    cost_trace: tuple


def huber(s, delta):
    """Robust kernel rho(s) applied to squared errors ``s``.

    Quadratic below the threshold, linear in sqrt(s) above:
    ``s`` if s <= delta^2, else ``delta (2 sqrt(s) - delta)``.
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(s_arr < 0):
        raise ValueError("squared errors must be non-negative")
    out = np.where(
        s_arr <= delta * delta,
        s_arr,
        delta * (2.0 * np.sqrt(s_arr) - delta),
    )
    return float(out) if np.isscalar(s) else out


def adaptive_delta(X, delta_rel=1.0):
    """Huber threshold scaled to the set's weight mass and image spread.

    delta = delta_rel * (mean |w_i|_1 / 2) * sqrt(sum_i |x2d_i - mean|^2 / (N-1))
    """
    n = len(X)
    if n < 2:
        raise DegenerateSet(f"adaptive threshold needs >= 2 points, got {n}")
    w_scale = float(X.w2d.mean())  # == |mean weight vector|_1 / 2 for w >= 0
    centered = X.x2d - X.x2d.mean(axis=0)
    spread = math.sqrt(float((centered * centered).sum()) / (n - 1))
    delta = float(delta_rel) * w_scale * spread
    if not (delta > 0 and math.isfinite(delta)):
        raise DegenerateSet(
            f"degenerate threshold {delta}: zero weight mass or coincident 2D points"
        )
    return delta


def _space_of(pose):
    t_fixed = pose.t_fixed if pose.space == SPACE_YAW1 else None
    return pose.space, t_fixed


def _cost_rows(X, space, params, t_fixed, delta, strict):
    return backend.cost_batch(
        space, params, t_fixed, X.x3d, X.x2d, X.w2d, X.camera.intr,
        delta, Z_MIN, strict,
    )


def _system_rows(X, space, params, t_fixed, delta, w2d=None):
    if w2d is None:
        w2d = X.w2d
    return backend.build_system_batch(
        space, params, t_fixed, X.x3d, X.x2d, w2d, X.camera.intr, delta, Z_MIN,
    )


def build_system(X, pose, delta):
    """Rescaled residual stack F (2N,) and Jacobian J (2N, d) at ``pose``.

    Rows of behind-camera points are zeroed; the returned boolean mask
    marks the points that do contribute. Raises `AllPointsInvalid` when no
    point is in front of the camera.
    """
    space, t_fixed = _space_of(pose)
    F, J, _, n_valid = _system_rows(X, space, pose.params[None], t_fixed, delta)
    if int(n_valid[0]) == 0:
        raise AllPointsInvalid("every correspondence is behind the camera")
    p_cam = X.x3d @ pose.R.T + pose.t
    valid = p_cam[:, 2] > Z_MIN
    return F[0], J[0], valid


def _retract_params(space, params, dy):
    """Batched pose update: params (B, P) stepped along tangent dy (B, d)."""
    if space == SPACE_YAW1:
        return normalize_angle(params + dy)
    if space == SPACE_YAW4:
        out = params + dy
        out[:, 3] = normalize_angle(out[:, 3])
        return out
    t = params[:, :3] + dy[:, :3]
    q = params[:, 3:7]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    T = np.empty(q.shape[:1] + (4, 3))
    T[:, 0, 0], T[:, 0, 1], T[:, 0, 2] = x, y, z
    T[:, 1, 0], T[:, 1, 1], T[:, 1, 2] = -w, -z, y
    T[:, 2, 0], T[:, 2, 1], T[:, 2, 2] = z, -w, -x
    T[:, 3, 0], T[:, 3, 1], T[:, 3, 2] = -y, x, -w
    qn = q + np.einsum("bij,bj->bi", T, dy[:, 3:])
    qn /= np.linalg.norm(qn, axis=1, keepdims=True)
    return np.concatenate([t, qn], axis=1)


def lm_solve(X, init, opts=None):
    """Damped least-squares descent from ``init`` with a trust region.

    The robust cost over accepted steps is non-increasing; iteration stops
    at ``opts.max_iter`` or when the accepted step norm drops below 1e-10
    (reported as ``converged``).
    """
    opts = opts or SolverOptions()
    _check_min_points(X, init.space)
    delta = adaptive_delta(X, opts.delta_rel)
    return _lm_core(X, init, opts, delta)


def _lm_core(X, init, opts, delta):
    space, t_fixed = _space_of(init)
    params = init.params.copy()
    lam = opts.lambda_init
    cost = float(_cost_rows(X, space, params[None], t_fixed, delta, False)[0])
    if not math.isfinite(cost):
        raise AllPointsInvalid("initial pose puts every correspondence behind the camera")
    trace = [cost]
    converged = False
    iters = 0
    for it in range(opts.max_iter):
        F, J, _, n_valid = _system_rows(X, space, params[None], t_fixed, delta)
        if int(n_valid[0]) == 0:
            raise AllPointsInvalid("every correspondence is behind the camera")
        F, J = F[0], J[0]
        A = J.T @ J
        g = J.T @ F
        D2 = np.clip(np.diag(A), _DIAG_FLOOR, None)
        step = None
        while True:
            try:
                fac = cho_factor(A + np.diag(lam * D2), lower=True)
                dy = -cho_solve(fac, g)
            except np.linalg.LinAlgError:
                lam *= opts.tr_shrink
                if lam > _LAMBDA_MAX:
                    raise SingularSystem(
                        "normal equations stay singular under maximal damping"
                    ) from None
                continue
            cand = _retract_params(space, params[None].copy(), dy[None])[0]
            cand_cost = float(
                _cost_rows(X, space, cand[None], t_fixed, delta, False)[0]
            )
            if math.isfinite(cand_cost) and cand_cost <= cost:
                step = (dy, cand, cand_cost)
                break
            lam *= opts.tr_shrink
            if lam > _LAMBDA_MAX:
                break
        iters = it + 1
        if step is None:
            break
        dy, params, cost = step
        lam = max(lam / opts.tr_grow, _LAMBDA_MIN)
        trace.append(cost)
        if float(np.linalg.norm(dy)) < _STEP_TOL:
            converged = True
            break
    cov = _covariance_core(X, space, params, t_fixed, delta, opts.eps)
    pose = pose_from_params(space, params, t_fixed)
    return SolveResult(pose, cov, cost, converged, iters, delta, tuple(trace))


def gn_solve(X, init, opts=None):
    """Fast mode: undamped-trust Gauss-Newton steps with a fixed eps floor.

    Every step is taken (no accept/reject), so the cost trace is not
    guaranteed monotone; intended for well-initialized inference.
    """
    opts = opts or SolverOptions()
    _check_min_points(X, init.space)
    delta = adaptive_delta(X, opts.delta_rel)
    space, t_fixed = _space_of(init)
    params = init.params.copy()
    cost = float(_cost_rows(X, space, params[None], t_fixed, delta, False)[0])
    if not math.isfinite(cost):
        raise AllPointsInvalid("initial pose puts every correspondence behind the camera")
    trace = [cost]
    converged = False
    iters = 0
    eye = np.eye(_DOF[space])
    for it in range(opts.max_iter):
        F, J, _, n_valid = _system_rows(X, space, params[None], t_fixed, delta)
        if int(n_valid[0]) == 0:
            raise AllPointsInvalid("every correspondence is behind the camera")
        F, J = F[0], J[0]
        A = J.T @ J + opts.eps * eye
        g = J.T @ F
        try:
            fac = cho_factor(A, lower=True)
        except np.linalg.LinAlgError:
            raise SingularSystem("eps-damped normal equations not positive definite") from None
        dy = -cho_solve(fac, g)
        params = _retract_params(space, params[None], dy[None])[0]
        cost = float(_cost_rows(X, space, params[None], t_fixed, delta, False)[0])
        trace.append(cost)
        iters = it + 1
        if float(np.linalg.norm(dy)) < _STEP_TOL:
            converged = True
            break
    cov = _covariance_core(X, space, params, t_fixed, delta, opts.eps)
    pose = pose_from_params(space, params, t_fixed)
    return SolveResult(pose, cov, cost, converged, iters, delta, tuple(trace))


def _covariance_core(X, space, params, t_fixed, delta, eps):
    _, J, _, _ = _system_rows(X, space, params[None], t_fixed, delta)
    J = J[0]
    A = J.T @ J + eps * np.eye(J.shape[1])
    fac = cho_factor(A, lower=True)
    cov = cho_solve(fac, np.eye(J.shape[1]))
    return 0.5 * (cov + cov.T)


def covariance(X, pose_star, opts=None, delta=None):
    """Local pose covariance (J'J + eps I)^{-1} at ``pose_star``.

    ``delta`` defaults to the set's adaptive threshold; pass the one stored
    in a `SolveResult` to match that solve exactly.
    """
    opts = opts or SolverOptions()
    if delta is None:
        delta = adaptive_delta(X, opts.delta_rel)
    space, t_fixed = _space_of(pose_star)
    return _covariance_core(X, space, pose_star.params, t_fixed, delta, opts.eps)


def _check_min_points(X, space):
    need = MIN_POINTS[space]
    if len(X) < need:
        raise DegenerateSet(f"{space} pose needs >= {need} points, got {len(X)}")


def _seed_yaws(m):
    """Canonical yaw seed grid: 8 evenly spaced angles, cycled."""
    return normalize_angle(2.0 * np.pi * (np.arange(m) % 8) / 8.0)


def _octahedral_quats():
    """The 24 rotations of the cube as unit quaternions (w, x, y, z)."""
    quats = [np.array([1.0, 0.0, 0.0, 0.0])]
    h = math.sqrt(0.5)
    for ax in range(3):
        for w, s in ((h, h), (0.0, 1.0), (h, -h)):  # 90, 180, 270 deg
            q = np.zeros(4)
            q[0] = w
            q[1 + ax] = s
            quats.append(q)
    for sx in (1.0, -1.0):
        for sy in (1.0, -1.0):
            for sz in (1.0, -1.0):  # +-120 deg about the 4 body diagonals
                quats.append(0.5 * np.array([1.0, sx, sy, sz]))
    for i, j in ((1, 2), (1, 3), (2, 3)):
        for s in (1.0, -1.0):  # 180 deg about the 6 edge axes
            q = np.zeros(4)
            q[i], q[j] = h, s * h
            quats.append(q)
    return np.stack(quats)


_SEED_QUATS = _octahedral_quats()


def _seed_params(X, space, t_fixed, m):
    """Canonical seed poses, one parameter row per hypothesis.

    The translation back-projects the weighted 2D centroid at the depth
    where the 3D cloud's RMS radius matches the observed 2D spread, then
    recenters on the 3D centroid, so the cloud starts in front of the
    camera roughly covering the observed pixels. Orientations cycle
    through a fixed grid (8 yaw angles, or the 24 cube rotations for
    quaternions) so that three polish iterations can reach any basin.
    """
    if space == SPACE_YAW1:
        return _seed_yaws(m)[:, None]
    cam = X.camera
    mass = X.w2d.sum(axis=1)
    p = mass / mass.sum()
    c2d = p @ X.x2d
    d2 = ((X.x2d - c2d) ** 2).sum(axis=1)
    spread2d = math.sqrt(float(p @ d2))
    c3d = X.x3d.mean(axis=0)
    spread3d = math.sqrt(float(((X.x3d - c3d) ** 2).sum(axis=1).mean()))
    f_bar = 0.5 * (cam.fx + cam.fy)
    z0 = f_bar * spread3d / max(spread2d, 1e-9)
    z0 = float(np.clip(z0, 10.0 * Z_MIN, 1e6))
    t0 = np.array(
        [
            (c2d[0] - cam.cx) / cam.fx * z0,
            (c2d[1] - cam.cy) / cam.fy * z0,
            z0,
        ]
    ) - c3d
    out = np.empty((m, 4 if space == SPACE_YAW4 else 7))
    out[:, :3] = t0
    if space == SPACE_YAW4:
        out[:, 3] = _seed_yaws(m)
    else:
        out[:, 3:] = _SEED_QUATS[np.arange(m) % len(_SEED_QUATS)]
    return out


def _solve_batch(Mmat, g):
    try:
        return np.linalg.solve(Mmat, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.zeros_like(g)
        for b in range(g.shape[0]):
            out[b] = np.linalg.lstsq(Mmat[b], g[b], rcond=None)[0]
        return out


def _sample_subsets(mass, m, n_sub, rng):
    """m subsets of n_sub distinct indices, p(i) proportional to mass.

    Weighted sampling without replacement via Gumbel-perturbed log masses
    (top-k keys per row). Returns (m, N) indicator masks.
    """
    n = mass.shape[0]
    logits = np.full(n, -np.inf)
    pos = mass > 0
    logits[pos] = np.log(mass[pos] / mass.sum())
    keys = logits[None, :] + rng.gumbel(size=(m, n))
    idx = np.argpartition(-keys, n_sub - 1, axis=1)[:, :n_sub]
    masks = np.zeros((m, n))
    np.put_along_axis(masks, idx, 1.0, axis=1)
    return masks


def random_sample_init(X, opts=None, rng=None, space=SPACE_QUAT6, t_fixed=None):
    """RANSAC-style initialization over weighted point subsets.

    Draws ``opts.M`` subsets of ``opts.n_sub`` distinct indices with
    probability proportional to each point's weight mass (Gumbel top-k),
    polishes each subset for ``opts.init_iters`` LM iterations from the
    canonical seed pose, and returns the hypothesis with the highest
    full-set log-likelihood. Deterministic for a given ``rng`` state.
    """
    opts = opts or SolverOptions()
    rng = rng if rng is not None else np.random.default_rng(0)
    if space == SPACE_YAW1 and t_fixed is None:
        raise ValueError("yaw-only initialization needs t_fixed")
    _check_min_points(X, space)
    n = len(X)
    if not opts.n_sub < n:
        raise ValueError(f"n_sub={opts.n_sub} must be smaller than the set size {n}")
    mass = X.w2d.sum(axis=1)
    if int((mass > 0).sum()) < opts.n_sub:
        raise DegenerateSet(
            f"need {opts.n_sub} points with nonzero weight, got {int((mass > 0).sum())}"
        )
    delta = adaptive_delta(X, opts.delta_rel)
    t_fixed = np.asarray(t_fixed, dtype=np.float64) if t_fixed is not None else None

    masks = _sample_subsets(mass, opts.M, opts.n_sub, rng)
    w_h = X.w2d[None, :, :] * masks[:, :, None]

    params = _seed_params(X, space, t_fixed, opts.M)
    d = _DOF[space]
    lam = np.full(opts.M, opts.lambda_init)
    cost = backend.cost_batch(
        space, params, t_fixed, X.x3d, X.x2d, w_h, X.camera.intr,
        delta, Z_MIN, False,
    )
    rows = np.arange(d)
    for _ in range(opts.init_iters):
        F, J, _, _ = _system_rows(X, space, params, t_fixed, delta, w2d=w_h)
        A = np.matmul(J.transpose(0, 2, 1), J)
        g = np.matmul(J.transpose(0, 2, 1), F[..., None])[..., 0]
        D2 = np.clip(A[:, rows, rows], _DIAG_FLOOR, None)
        Mmat = A.copy()
        Mmat[:, rows, rows] += lam[:, None] * D2
        dy = -_solve_batch(Mmat, g)
        cand = _retract_params(space, params.copy(), dy)
        cand_cost = backend.cost_batch(
            space, cand, t_fixed, X.x3d, X.x2d, w_h, X.camera.intr,
            delta, Z_MIN, False,
        )
        accept = np.isfinite(cand_cost) & (cand_cost <= cost)
        params = np.where(accept[:, None], cand, params)
        cost = np.where(accept, cand_cost, cost)
        lam = np.where(accept, np.maximum(lam / opts.tr_grow, _LAMBDA_MIN),
                       lam * opts.tr_shrink)

    ll = -_cost_rows(X, space, params, t_fixed, delta, True)
    best = int(np.argmax(ll))
    if not np.isfinite(ll[best]):
        raise NoValidHypothesis("every subset hypothesis leaves points behind the camera")
    return pose_from_params(space, params[best], t_fixed)


def solve_guarded(X, y_gt, opts=None, rng=None):
    """Training-mode solve: LM from the better of {ground truth, hypothesis}.

    The returned cost never exceeds the robust cost at ``y_gt`` (up to
    floating-point slack), because the start point is at least as likely as
    ``y_gt`` and accepted steps do not increase the cost.
    """
    opts = opts or SolverOptions()
    rng = rng if rng is not None else np.random.default_rng(0)
    space, t_fixed = _space_of(y_gt)
    delta = adaptive_delta(X, opts.delta_rel)
    try:
        hyp = random_sample_init(X, opts, rng, space=space, t_fixed=t_fixed)
    except NoValidHypothesis:
        hyp = None
    init = y_gt
    if hyp is not None:
        pair = np.stack([y_gt.params, hyp.params])
        ll = -_cost_rows(X, space, pair, t_fixed, delta, True)
        if ll[1] > ll[0]:
            init = hyp
    _check_min_points(X, space)
    return _lm_core(X, init, opts, delta)


def solve_many(sets, inits, opts=None, workers=None):
    """LM-solve each (set, init) pair, optionally across a thread pool.

    ``workers`` defaults to the ``PROBPNP_THREADS`` environment variable
    (1 if unset). Results keep input order.
    """
    opts = opts or SolverOptions()
    sets = list(sets)
    inits = list(inits)
    if len(sets) != len(inits):
        raise ValueError(f"got {len(sets)} sets but {len(inits)} inits")
    if workers is None:
        workers = thread_count()
    if workers <= 1 or len(sets) <= 1:
        return [lm_solve(X, y0, opts) for X, y0 in zip(sets, inits)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(lm_solve, X, y0, opts) for X, y0 in zip(sets, inits)]
        return [f.result() for f in futs]
