"""Desk-scale correspondence learning on synthetic scenes.

For each view the learner sees indexed 2D projections of a hidden rigid
point set under a known ground-truth pose, and optimizes free 3D point
coordinates plus a weight head so that pose inference from its own
correspondences succeeds on held-out views. Training descends the Monte
Carlo KL pose loss; a reprojection-only mode is the baseline that
degenerates (its weights have a trivial zero), and monte_carlo+reg adds
the one-step derivative regularizer.

Everything is seeded: identical (scene, config, rng) inputs give
bit-identical traces. Per-view loss evaluations inside a step draw their
Monte Carlo seeds up front from the training generator, so they are
mutually independent and could run in parallel; parameter updates are
serialized per step.
"""
import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from . import loss
from .errors import BehindCamera, NonFiniteGradient, ProbPnpError
from .geometry import (
    SPACE_QUAT6,
    SPACE_YAW1,
    Z_MIN,
    Camera,
    CorrespondenceSet,
    Yaw4DoF,
    normalize_angle,
    rot_y,
    translation_distance,
)
from .mc import McConfig, amis
from .solver import SolverOptions, lm_solve, random_sample_init

MODE_MONTE_CARLO = "monte_carlo"
MODE_REPROJECTION = "reprojection_only"
MODE_MONTE_CARLO_REG = "monte_carlo+reg"
_MODES = (MODE_MONTE_CARLO, MODE_REPROJECTION, MODE_MONTE_CARLO_REG)

_DEFAULT_CAMERA = Camera(500.0, 500.0, 0.0, 0.0)
# cheap solver settings for the inner training loops (8-point sets)
_TRAIN_OPTS = SolverOptions(M=16, init_iters=2)


@dataclass(frozen=True)
class SceneSpec:
    """Synthetic scene recipe: hidden shape plus pose and noise ranges.

    When ``shape`` is given it is used verbatim (and ``n_points`` is set
    from it); otherwise ``n_points`` are drawn uniformly in the cube of
    half side ``half_extent``, replicated under k-fold yaw rotation when
    ``symmetry`` > 1. Ground-truth poses are yaw-plus-translation, with
    yaw uniform in ``yaw_range``, lateral offsets uniform in
    ``[-xy_range, xy_range]``, and depth uniform in ``depth_range``.

    The default ranges are deliberately narrow. Small viewing diversity
    leaves each point's position along its mean viewing ray barely
    observable to the reprojection cost alone, so training outcomes
    separate the losses: the posterior-aware mode must resolve those
    directions through pose discrimination, while reprojection-only
    training leaves them unresolved. Widening ``yaw_range`` toward a
    full turn makes every direction triangulable and the modes converge
    to similar solutions.
    """

    n_points: int = 8
    half_extent: float = 0.25
    n_views: int = 64
    n_val: int = 32
    depth_range: tuple = (3.5, 4.5)
    xy_range: float = 0.10
    yaw_range: tuple = (-0.25, 0.25)
    pixel_noise_sigma: float = 0.5
    camera: Camera = _DEFAULT_CAMERA
    symmetry: int = 1
    shape: np.ndarray = None

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError(f"need at least one training view, got {self.n_views}")
        if self.n_val < 0:
            raise ValueError(f"validation view count must be >= 0, got {self.n_val}")
        if self.pixel_noise_sigma < 0:
            raise ValueError(f"pixel noise must be >= 0, got {self.pixel_noise_sigma}")
        if self.symmetry < 1:
            raise ValueError(f"symmetry order must be >= 1, got {self.symmetry}")
        if self.half_extent <= 0 or self.xy_range < 0:
            raise ValueError("half_extent must be > 0 and xy_range >= 0")
        for name in ("depth_range", "yaw_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must be (lo, hi) with lo <= hi, got {(lo, hi)}")
        if self.shape is not None:
            pts = np.asarray(self.shape, dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 3 or not np.all(np.isfinite(pts)):
                raise ValueError("shape must be a finite (N, 3) array")
            object.__setattr__(self, "shape", pts)
            object.__setattr__(self, "n_points", pts.shape[0])
        elif self.n_points % self.symmetry:
            raise ValueError(
                f"point count {self.n_points} not divisible by symmetry {self.symmetry}"
            )


@dataclass(frozen=True)
class View:
    """One observation: indexed projections of the shape at a hidden pose."""

    x2d: np.ndarray
    y_gt: object
    camera: Camera


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    truth: np.ndarray
    train_views: tuple
    val_views: tuple


def _sample_view(spec, truth, rng):
    fx, fy, cx, cy = spec.camera.intr
    z_floor = 10 * Z_MIN
    worst = -math.inf
    for _ in range(100):
        theta = rng.uniform(spec.yaw_range[0], spec.yaw_range[1])
        t = np.array([
            rng.uniform(-spec.xy_range, spec.xy_range),
            rng.uniform(-spec.xy_range, spec.xy_range),
            rng.uniform(spec.depth_range[0], spec.depth_range[1]),
        ])
        pose = Yaw4DoF(t, theta)
        p_cam = truth @ pose.R.T + pose.t
        z = p_cam[:, 2]
        worst = max(worst, float(z.min()))
        if not np.all(z > z_floor):
            continue
        x2d = np.stack([fx * p_cam[:, 0] / z + cx, fy * p_cam[:, 1] / z + cy], axis=1)
        x2d = x2d + rng.normal(0.0, spec.pixel_noise_sigma, x2d.shape)
        return View(x2d, pose, spec.camera)
    # 100 draws exhausted; report the least-bad depth seen
    raise BehindCamera(worst, z_floor)


def generate_scene(spec, rng=0):
    """Draw the hidden shape and seeded noisy views (train + validation).

    Pose sampling retries up to 100 draws per view before giving up with
    BehindCamera. With ``pixel_noise_sigma`` 0 the observations equal the
    exact projections.
    """
    rng = np.random.default_rng(rng)
    if spec.shape is not None:
        truth = spec.shape
    elif spec.symmetry > 1:
        base = rng.uniform(
            -spec.half_extent, spec.half_extent,
            (spec.n_points // spec.symmetry, 3),
        )
        truth = np.concatenate([
            base @ rot_y(2.0 * np.pi * j / spec.symmetry).T
            for j in range(spec.symmetry)
        ])
    else:
        truth = rng.uniform(-spec.half_extent, spec.half_extent, (spec.n_points, 3))
    views = [_sample_view(spec, truth, rng) for _ in range(spec.n_views + spec.n_val)]
    return Scene(spec, truth, tuple(views[: spec.n_views]), tuple(views[spec.n_views:]))


@dataclass(frozen=True)
class LearnerParams:
    """Learnable state: free 3D points and the weighting head."""

    x3d_free: np.ndarray
    weight_head: loss.WeightHead

    def __post_init__(self):
        pts = np.asarray(self.x3d_free, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or not np.all(np.isfinite(pts)):
            raise ValueError("x3d_free must be a finite (N, 3) array")
        if pts.shape[0] != self.weight_head.logits.shape[0]:
            raise ValueError(
                f"point count mismatch: {pts.shape[0]} coordinates vs "
                f"{self.weight_head.logits.shape[0]} logit rows"
            )
        object.__setattr__(self, "x3d_free", pts)

    def weights(self):
        return loss.weight_head(self.weight_head)


def init_params(n_points, rng=0, head_kind="softmax", spread=0.01,
                log_scale=0.0):
    """Small-spread random points with a neutral weight head.

    Both head kinds start at identical weights (exp(log_scale)/n per
    channel): softmax from zero logits, exponential from logits at
    -log(n). Ablations then compare dynamics, not initial conditions.
    Starting below zero encodes low initial confidence in the untrained
    points; the training losses are then responsible for raising it.
    """
    rng = np.random.default_rng(rng)
    x3d = rng.normal(0.0, spread, (n_points, 3))
    base = 0.0 if head_kind == "softmax" else -math.log(n_points)
    head = loss.WeightHead(
        np.full((n_points, 2), base), np.full(2, float(log_scale)), head_kind
    )
    return LearnerParams(x3d, head)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loss settings for :func:`train`.

    ``mc`` supplies the sampling effort (T, K') for each per-view loss;
    its own seed field is ignored because every evaluation draws a fresh
    seed from the training generator. ``reg_weight`` only matters in
    monte_carlo+reg mode. ``lr_decay`` is the factor the step size ramps
    down to (exponentially) over the final quarter of the run; 1.0 keeps
    it constant. The ramp tames the growing effective plasticity as the
    learned scale rises without costing early progress.
    """

    steps: int = 500
    lr: float = 3e-4
    momentum: float = 0.9
    minibatch: int = 8
    mc: McConfig = McConfig(T=2, K_prime=64)
    loss_mode: str = MODE_MONTE_CARLO
    reg_weight: float = 0.05
    head_kind: str = "softmax"
    init_spread: float = 0.01
    init_log_scale: float = -1.2
    lr_decay: float = 0.1
    val_every: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.minibatch < 1 or self.val_every < 1:
            raise ValueError("minibatch and val_every must be >= 1")
        if self.loss_mode not in _MODES:
            raise ValueError(f"loss_mode must be one of {_MODES}, got {self.loss_mode!r}")
        if self.head_kind not in ("softmax", "exp"):
            raise ValueError(f"head_kind must be softmax|exp, got {self.head_kind!r}")
        if self.reg_weight < 0:
            raise ValueError(f"reg_weight must be >= 0, got {self.reg_weight}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")


@dataclass(frozen=True)
class TrainTrace:
    """Per-step training record.

    Validation columns repeat the most recent periodic evaluation and are
    NaN before the first one; loss columns that a mode does not compute
    (l_pred/l_kl in reprojection_only, l_reg outside +reg) are NaN.
    """

    step: np.ndarray
    l_tgt: np.ndarray
    l_pred: np.ndarray
    l_kl: np.ndarray
    l_reg: np.ndarray
    log_scale: np.ndarray
    val_rot_deg: np.ndarray
    val_trans: np.ndarray

    def __len__(self):
        return len(self.step)


@dataclass(frozen=True)
class TrainResult:
    params: LearnerParams
    trace: TrainTrace
    final_val: object


def _nanstat(fn, arr):
    arr = arr[np.isfinite(arr)]
    return float(fn(arr)) if arr.size else math.inf


@dataclass(frozen=True)
class EvalSummary:
    """Per-view pose errors with failures as NaN (counted separately).

    The summary statistics skip failed views; they are +inf when every
    view failed.
    """

    rot_deg: np.ndarray
    trans: np.ndarray
    n_failures: int

    @property
    def median_rot_deg(self):
        return _nanstat(np.median, self.rot_deg)

    @property
    def mean_rot_deg(self):
        return _nanstat(np.mean, self.rot_deg)

    @property
    def median_trans(self):
        return _nanstat(np.median, self.trans)

    @property
    def mean_trans(self):
        return _nanstat(np.mean, self.trans)


def _rot_angle(ra, rb):
    c = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def _symmetric_rot_err(pose, y_gt, k):
    # shape invariance under yaw multiples of 2pi/k makes those poses
    # indistinguishable, so error is taken over the equivalence class
    return min(
        _rot_angle(pose.R, y_gt.R @ rot_y(2.0 * np.pi * j / k)) for j in range(k)
    )


def evaluate(params, views, opts=None, symmetry=1, seed=0):
    """Solve each view from scratch with the learned correspondences.

    Pose recovery is hypothesis sampling plus LM refinement (no access to
    the true pose). Rotation error is the geodesic angle minimized over
    the declared k-fold yaw symmetry; solver exceptions count as failures
    and leave NaN rows.
    """
    opts = opts or SolverOptions()
    w2d = params.weights()
    rot = np.full(len(views), np.nan)
    trans = np.full(len(views), np.nan)
    failures = 0
    for i, view in enumerate(views):
        X = CorrespondenceSet.from_arrays(params.x3d_free, view.x2d, w2d, view.camera)
        space = view.y_gt.space
        t_fixed = view.y_gt.t_fixed if space == SPACE_YAW1 else None
        try:
            init = random_sample_init(
                X, opts, np.random.default_rng([seed, i]), space=space, t_fixed=t_fixed
            )
            res = lm_solve(X, init, opts)
        except ProbPnpError:
            failures += 1
            continue
        rot[i] = math.degrees(_symmetric_rot_err(res.pose_star, view.y_gt, symmetry))
        trans[i] = translation_distance(res.pose_star, view.y_gt)
    return EvalSummary(rot, trans, failures)


def _abort(reason, step, trace, detail):
    err = NonFiniteGradient(
        f"training aborted at step {step + 1}: {reason}\n{detail}"
    )
    err.step = step + 1
    err.trace = trace
    return err


def train(scene, cfg=None, rng=0):
    """Momentum SGD on x3d_free and the weight head.

    Per step the gradient is averaged over a random minibatch of training
    views. monte_carlo descends the KL loss, reprojection_only descends
    only the robust cost at the ground-truth pose, and monte_carlo+reg
    adds ``reg_weight`` times the derivative regularizer (reusing the KL
    solve). Validation runs every ``val_every`` steps and at the end.

    Raises NonFiniteGradient as soon as any loss, weight, or gradient
    goes non-finite (or pose sampling degenerates); the exception carries
    ``step`` and the partial ``trace`` as a diagnostic dump.
    """
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(rng)
    n = scene.truth.shape[0]
    start = init_params(
        n, rng, cfg.head_kind, cfg.init_spread, cfg.init_log_scale
    )
    x3d = start.x3d_free.copy()
    logits = start.weight_head.logits.copy()
    log_scale = start.weight_head.log_scale.copy()
    v_x3d, v_logits, v_scale = (
        np.zeros_like(x3d), np.zeros_like(logits), np.zeros_like(log_scale),
    )
    n_train = len(scene.train_views)
    batch_size = min(cfg.minibatch, n_train)
    mc_mode = cfg.loss_mode != MODE_REPROJECTION
    with_reg = cfg.loss_mode == MODE_MONTE_CARLO_REG

    steps = cfg.steps
    a_tgt, a_pred, a_kl, a_reg = (np.full(steps, np.nan) for _ in range(4))
    a_scale = np.full((steps, 2), np.nan)
    a_vrot, a_vtrans = np.full(steps, np.nan), np.full(steps, np.nan)

    def partial_trace(upto):
        sl = slice(0, upto + 1)
        return TrainTrace(
            np.arange(1, upto + 2), a_tgt[sl], a_pred[sl], a_kl[sl], a_reg[sl],
            a_scale[sl], a_vrot[sl], a_vtrans[sl],
        )

    last_rot = last_trans = np.nan
    final_val = None
    for s in range(steps):
        a_scale[s] = log_scale
        params_ok = (np.all(np.isfinite(x3d)) and np.all(np.isfinite(logits))
                     and np.all(np.isfinite(log_scale)))
        if not params_ok:
            raise _abort(
                "parameters went non-finite", s, partial_trace(s),
                f"log_scale={log_scale!r}",
            )
        head = loss.WeightHead(logits, log_scale, cfg.head_kind)
        with np.errstate(over="ignore"):
            w2d = loss.weight_head(head)
        if not np.all(np.isfinite(w2d)):
            raise _abort(
                "weight head overflowed", s, partial_trace(s),
                f"log_scale={log_scale!r}\nlogit range="
                f"{(float(np.min(logits)), float(np.max(logits)))!r}",
            )
        idx = rng.choice(n_train, size=batch_size, replace=False)
        seeds = rng.integers(np.iinfo(np.int64).max, size=batch_size)
        g_x3d = np.zeros_like(x3d)
        g_w2d = np.zeros_like(w2d)
        sum_tgt = sum_pred = sum_reg = 0.0
        for view_i, mc_seed in zip(idx, seeds):
            view = scene.train_views[view_i]
            X = CorrespondenceSet.from_arrays(x3d, view.x2d, w2d, view.camera)
            try:
                if mc_mode:
                    rep = loss.kl_loss(
                        X, view.y_gt,
                        cfg=dataclasses.replace(cfg.mc, seed=int(mc_seed)),
                        opts=_TRAIN_OPTS,
                    )
                    g_x3d += rep.grads.x3d
                    g_w2d += rep.grads.w2d
                    sum_tgt += rep.l_tgt
                    sum_pred += rep.l_pred
                    if with_reg:
                        rr = loss.reg_loss(
                            X, view.y_gt, opts=_TRAIN_OPTS, solve=rep.solve
                        )
                        g_x3d += cfg.reg_weight * rr.grads.x3d
                        g_w2d += cfg.reg_weight * rr.grads.w2d
                        sum_reg += rr.l_reg
                else:
                    value, grads = loss.reprojection_loss(X, view.y_gt)
                    g_x3d += grads.x3d
                    g_w2d += grads.w2d
                    sum_tgt += value
            except ProbPnpError as exc:
                raise _abort(
                    f"pose inference degenerated on view {view_i}: {exc}",
                    s, partial_trace(s), f"log_scale={log_scale!r}",
                ) from exc
        g_x3d /= batch_size
        g_w2d /= batch_size
        d_logits, d_scale = loss.head_grads(head, g_w2d)
        a_tgt[s] = sum_tgt / batch_size
        if mc_mode:
            a_pred[s] = sum_pred / batch_size
            a_kl[s] = a_tgt[s] + a_pred[s]
        if with_reg:
            a_reg[s] = sum_reg / batch_size
        pieces = (a_tgt[s], g_x3d, d_logits, d_scale)
        if not all(np.all(np.isfinite(p)) for p in pieces):
            norms = {
                "l_tgt": a_tgt[s],
                "l_pred": a_pred[s],
                "|g_x3d|": float(np.max(np.abs(g_x3d))),
                "|g_logits|": float(np.max(np.abs(d_logits))),
                "|g_scale|": float(np.max(np.abs(d_scale))),
            }
            raise _abort(
                "non-finite loss or gradient", s, partial_trace(s),
                f"minibatch views={idx.tolist()}\n{norms!r}",
            )
        v_x3d = cfg.momentum * v_x3d + g_x3d
        v_logits = cfg.momentum * v_logits + d_logits
        v_scale = cfg.momentum * v_scale + d_scale
        lr = cfg.lr
        if cfg.lr_decay < 1.0 and steps > 1:
            # constant for the first 3/4, then exponential ramp to lr*decay
            ramp = max(0.0, s / (steps - 1) - 0.75) / 0.25
            lr *= cfg.lr_decay ** ramp
        x3d -= lr * v_x3d
        logits -= lr * v_logits
        log_scale -= lr * v_scale
        if scene.val_views and ((s + 1) % cfg.val_every == 0 or s == steps - 1):
            snap = LearnerParams(
                x3d.copy(),
                loss.WeightHead(logits.copy(), log_scale.copy(), cfg.head_kind),
            )
            final_val = evaluate(
                snap, scene.val_views, opts=_TRAIN_OPTS,
                symmetry=scene.spec.symmetry,
            )
            last_rot = final_val.median_rot_deg
            last_trans = final_val.median_trans
        a_vrot[s] = last_rot
        a_vtrans[s] = last_trans
    try:
        params = LearnerParams(x3d, loss.WeightHead(logits, log_scale, cfg.head_kind))
    except ValueError as exc:
        raise _abort(
            "parameters went non-finite on the last update", steps - 1,
            partial_trace(steps - 1), str(exc),
        ) from exc
    return TrainResult(params, partial_trace(steps - 1), final_val)


def ema(values, window=50):
    """Exponential moving average with alpha = 2 / (window + 1)."""
    v = np.asarray(values, dtype=np.float64)
    alpha = 2.0 / (window + 1.0)
    out = np.empty_like(v)
    acc = v[0]
    for i, x in enumerate(v):
        acc += alpha * (x - acc)
        out[i] = acc
    return out


def loss_nonincreasing(l_kl, window=50, tail_frac=0.8, rel_slack=0.02):
    """True when the smoothed loss never rises above its level at the
    start of the final ``tail_frac`` of training.

    The slack is relative to that reference level and absorbs Monte
    Carlo jitter; NaN anywhere in the tail counts as increasing.
    """
    e = ema(l_kl, window)
    k = int(math.floor(len(e) * (1.0 - tail_frac)))
    tail = e[k:]
    ref = tail[0]
    bound = ref + rel_slack * abs(ref) + 1e-12
    return bool(np.all(tail <= bound))


def _spread(pts):
    pts = np.asarray(pts, dtype=np.float64)
    return float(np.sqrt(np.mean(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1))))


def collapse_detected(x3d_learned, truth, ratio=0.1):
    """Degeneracy check: learned coordinate spread below ``ratio`` times
    the true shape's spread (RMS distance from the centroid)."""
    return _spread(x3d_learned) < ratio * _spread(truth)


@dataclass(frozen=True)
class ModesReport:
    """Yaw histogram of a sampled pose posterior.

    ``modes`` has one row (basin mass-weighted mean yaw, basin mass) per
    detected mode, heaviest first; ``mass`` is the raw per-bin sample
    mass (sums to 1).
    """

    bin_edges: np.ndarray
    mass: np.ndarray
    modes: np.ndarray
    l_pred: float
    batch: object


def _circular_modes(mass, edges, min_mass):
    bins = len(mass)
    centers = (edges[:-1] + edges[1:]) / 2.0

    def basin_center(basin):
        # weighted circular mean, robust to the peak straddling -pi/pi
        w = mass[basin]
        if w.sum() <= 0:
            return centers[basin[len(basin) // 2]]
        ang = centers[basin]
        return math.atan2(float(np.sum(w * np.sin(ang))),
                          float(np.sum(w * np.cos(ang))))

    # short triangular smoothing so sparse-sample jitter cannot split a
    # mode into neighboring micro-peaks; basin masses stay raw
    kernel = np.array([1.0, 2.0, 3.0, 2.0, 1.0])
    kernel /= kernel.sum()
    padded = np.concatenate([mass[-2:], mass, mass[:2]])
    sm = np.convolve(padded, kernel, mode="valid")
    peaks = list(np.where((sm > np.roll(sm, 1)) & (sm >= np.roll(sm, -1)))[0])
    if not peaks:
        return np.zeros((0, 2))

    def valley_between(a, b):
        arc = np.arange(a + 1, b if b > a else b + bins) % bins
        return int(arc[np.argmin(sm[arc])]) if arc.size else a

    # merge neighbors whose separating dip is shallow: importance-weight
    # jitter produces sub-peaks that a density oracle would not
    while len(peaks) > 1:
        dips = []
        for i, a in enumerate(peaks):
            b = peaks[(i + 1) % len(peaks)]
            v = valley_between(a, b)
            floor = min(sm[a], sm[b])
            dips.append((sm[v] / floor if floor > 0 else 1.0, i))
        ratio, i = max(dips)
        if ratio < 0.6:
            break
        a, b = peaks[i], peaks[(i + 1) % len(peaks)]
        peaks.pop(i if sm[a] <= sm[b] else (i + 1) % len(peaks))
    if len(peaks) == 1:
        total = float(mass.sum())
        if total < min_mass:
            return np.zeros((0, 2))
        return np.array([[basin_center(np.arange(bins)), total]])
    valleys = [valley_between(a, b) for a, b in zip(peaks, peaks[1:] + peaks[:1])]
    rows = []
    for i in range(len(peaks)):
        lo = valleys[i - 1]
        hi = valleys[i]
        basin = np.arange(lo + 1, hi + 1 if hi > lo else hi + 1 + bins) % bins
        rows.append((basin_center(basin), float(mass[basin].sum())))
    rows = [r for r in rows if r[1] >= min_mass]
    rows.sort(key=lambda r: -r[1])
    return np.array(rows) if rows else np.zeros((0, 2))


def posterior_modes_report(X, view, cfg=None, opts=None, bins=36, min_mass=0.05,
                           seed=0):
    """Sample the pose posterior for one view and histogram its yaw.

    The pose space comes from the view's ground-truth pose and must be
    yaw-parameterized. Inference is from scratch (hypothesis sampling
    plus LM, then AMIS); modes are local maxima of the smoothed circular
    histogram whose basins hold at least ``min_mass`` of the posterior.
    ``cfg.seed`` is ignored: both the hypothesis draw and the sampler
    derive from ``seed``.

    The solve pins down position, but a single solve cannot be trusted
    for orientation when the likelihood is multimodal (the whole point
    of this report), so the first proposal's yaw variance is floored at
    (pi/3)^2 to cover the circle. The deterministic-mixture weighting
    keeps that wide component in play while later rounds concentrate.
    """
    cfg = cfg or McConfig()
    cfg = dataclasses.replace(cfg, seed=np.random.SeedSequence([seed, 1]))
    opts = opts or SolverOptions()
    space = view.y_gt.space
    if space == SPACE_QUAT6:
        raise ValueError("yaw histogram needs a yaw-parameterized pose space")
    t_fixed = view.y_gt.t_fixed if space == SPACE_YAW1 else None
    Xv = X.replace(x2d=view.x2d)
    init = random_sample_init(
        Xv, opts, np.random.default_rng([seed, 0]), space=space, t_fixed=t_fixed
    )
    solve = lm_solve(Xv, init, opts)
    cov = solve.covariance.copy()
    yaw_i = cov.shape[0] - 1
    cov[yaw_i, yaw_i] = max(cov[yaw_i, yaw_i], (np.pi / 3.0) ** 2)
    batch = amis(Xv, dataclasses.replace(solve, covariance=cov), cfg)
    yaw = normalize_angle(batch.params[:, -1])
    weights = batch.normalized_weights()
    edges = np.linspace(-np.pi, np.pi, bins + 1)
    which = np.clip(np.digitize(yaw, edges) - 1, 0, bins - 1)
    mass = np.bincount(which, weights=weights, minlength=bins)
    modes = _circular_modes(mass, edges, min_mass)
    return ModesReport(edges, mass, modes, batch.l_pred, batch)


def write_trace(trace, path):
    """One JSON record per step, for the plotting front end."""
    with open(path, "w") as fh:
        for i in range(len(trace)):
            rec = {
                "step": int(trace.step[i]),
                "l_tgt": float(trace.l_tgt[i]),
                "l_pred": float(trace.l_pred[i]),
                "l_kl": float(trace.l_kl[i]),
                "l_reg": float(trace.l_reg[i]),
                "log_scale": [float(v) for v in trace.log_scale[i]],
                "val_rot_deg": float(trace.val_rot_deg[i]),
                "val_trans": float(trace.val_trans[i]),
            }
            fh.write(json.dumps(rec) + "\n")


def read_trace(path):
    with open(path) as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    if not recs:
        raise ValueError(f"empty trace file: {path}")

    def col(key):
        return np.array([r[key] for r in recs], dtype=np.float64)

    return TrainTrace(
        np.array([r["step"] for r in recs]),
        col("l_tgt"), col("l_pred"), col("l_kl"), col("l_reg"),
        np.array([r["log_scale"] for r in recs], dtype=np.float64),
        col("val_rot_deg"), col("val_trans"),
    )
