"""Monte Carlo evaluation of the pose-posterior integral.

``l_pred = log Z = log integral exp(log p(X|y)) dy`` is estimated by
importance sampling: either a single proposal (`vanilla_is`) or adaptive
multiple importance sampling (`amis`), where each iteration reweights every
historical sample against the deterministic mixture of all proposals so
far, then refits the next proposal from the weighted samples.

All bookkeeping stays in the log domain: log likelihoods of realistic
instances reach far below -700, so the linear-domain ratios of the usual
pseudo-code would underflow to zero. A sample's weight is
``log_v = log p(X|y) - log Q(y)``; -inf marks zero-likelihood samples
(behind-camera poses), which drop out of refits and estimates naturally.

For yaw-only problems a dense trapezoid quadrature over the circle doubles
as the exactness oracle (`yaw_quadrature_lpred`, `yaw_mode_masses`).
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import backend
from .distributions import (
    Proposal,
    acg_fit,
    init_proposal,
    logpdf_params,
    mvt_fit,
    MvtParams,
    sample_params,
    vmu_fit,
)
from .errors import (
    AllWeightsZero,
    FitDiverged,
    ProposalCollapse,
    RankDeficientFit,
)
from .geometry import SPACE_YAW1, SPACE_YAW4, Z_MIN, pose_from_params
from .solver import adaptive_delta


@dataclass(frozen=True)
class McConfig:
    """Sampling budget: T adaptation iterations of K_prime samples each."""

    T: int = 4
    K_prime: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.K_prime < 2:
            raise ValueError(f"K_prime must be >= 2, got {self.K_prime}")


@dataclass(frozen=True)
class McBatch:
    """Weighted pose samples plus the proposals that produced them.

    ``params`` holds raw pose parameter rows (layout of the pose space),
    ``log_p`` the strict log-likelihood of each sample, ``log_v`` its log
    importance weight against the proposal mixture, and ``iteration`` the
    adaptation round each sample was drawn in.
    """

    space: str
    t_fixed: np.ndarray
    params: np.ndarray
    log_p: np.ndarray
    log_v: np.ndarray
    iteration: np.ndarray
    proposals: tuple
    l_pred: float

    def __len__(self):
        return self.params.shape[0]

    @property
    def poses(self):
        return [pose_from_params(self.space, row, self.t_fixed) for row in self.params]

    @property
    def samples(self):
        """(pose, log_v) pairs, materialized on demand."""
        return list(zip(self.poses, self.log_v.tolist()))

    def normalized_weights(self):
        """Self-normalized importance weights (sum 1; -inf samples get 0)."""
        m = np.max(self.log_v)
        if not np.isfinite(m):
            raise AllWeightsZero("every importance weight is zero")
        w = np.exp(self.log_v - m)
        return w / w.sum()


def _flat_delta(X):
    """Adaptive threshold, or None for zero-mass sets (flat likelihood)."""
    if float(X.w2d.sum()) == 0.0:
        return None
    return adaptive_delta(X)


def _loglik_rows(X, space, params, t_fixed, delta):
    if delta is None:
        return np.zeros(params.shape[0])
    return -backend.cost_batch(
        space, params, t_fixed, X.x3d, X.x2d, X.w2d, X.camera.intr,
        delta, Z_MIN, True,
    )


def log_likelihood(X, pose, delta=None):
    """Strict log p(X|y): -cost, -inf when a counted point is behind.

    Zero-mass sets have a flat likelihood: 0 for every pose. ``delta``
    overrides the adaptive robustness threshold (callers that freeze it,
    like finite-difference oracles, must evaluate perturbed sets under
    the unperturbed threshold).
    """
    if delta is None:
        delta = _flat_delta(X)
    t_fixed = pose.t_fixed if pose.space == SPACE_YAW1 else None
    return float(_loglik_rows(X, pose.space, pose.params[None], t_fixed, delta)[0])


def vanilla_is(X, q, K, rng):
    """Single-proposal importance sampling with K draws."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    delta = _flat_delta(X)
    params = sample_params(q, rng, K)
    log_p = _loglik_rows(X, q.space, params, q.t_fixed, delta)
    log_q = logpdf_params(q, params)
    log_v = log_p - log_q
    if not np.any(np.isfinite(log_v)):
        raise AllWeightsZero("every sample landed in zero-likelihood territory")
    l_pred = float(logsumexp(log_v) - math.log(K))
    return McBatch(
        q.space, q.t_fixed, params, log_p, log_v,
        np.zeros(K, dtype=np.int64), (q,), l_pred,
    )


def _refit_component_fallback(q_prev, params, weights):
    """Refit each proposal component; a failing component keeps its
    previous parameters (the documented fallback), with one inflation
    retry for a rank-deficient position scatter."""
    if q_prev.space == SPACE_YAW1:
        try:
            orientation = vmu_fit(params[:, 0], weights)
        except RankDeficientFit:
            orientation = q_prev.orientation
        return Proposal(SPACE_YAW1, None, orientation, t_fixed=q_prev.t_fixed)
    try:
        position = mvt_fit(params[:, :3], weights)
    except RankDeficientFit as e:
        position = q_prev.position
        if e.mu is not None and e.sigma is not None:
            ridge = 1e-6 * max(float(np.trace(e.sigma)) / 3.0, 1.0)
            try:
                position = MvtParams(e.mu, e.sigma + ridge * np.eye(3))
            except ValueError:
                position = q_prev.position
    try:
        if q_prev.space == SPACE_YAW4:
            orientation = vmu_fit(params[:, 3], weights)
        else:
            orientation = acg_fit(params[:, 3:], weights)
    except (RankDeficientFit, FitDiverged):
        orientation = q_prev.orientation
    if position is None or orientation is None:
        raise ProposalCollapse("no usable proposal component survived the refit")
    return Proposal(q_prev.space, position, orientation, t_fixed=q_prev.t_fixed)


def amis(X, solve, cfg=None, pose_space=None):
    """Adaptive multiple importance sampling seeded by a solver result.

    Iteration t draws K' samples from the newest proposal, then reweights
    every sample drawn so far against the equal mixture of all t proposals
    (deterministic-mixture weighting), and refits the next proposal from
    the full weighted history. Bit-reproducible for a given ``cfg.seed``.
    """
    cfg = cfg or McConfig()
    rng = np.random.default_rng(cfg.seed)
    q1 = init_proposal(solve, pose_space)
    delta = _flat_delta(X)
    proposals = [q1]
    blocks, logp_blocks = [], []
    log_v = None
    for t in range(cfg.T):
        new = sample_params(proposals[-1], rng, cfg.K_prime)
        blocks.append(new)
        logp_blocks.append(_loglik_rows(X, q1.space, new, q1.t_fixed, delta))
        all_params = np.concatenate(blocks, axis=0)
        log_p = np.concatenate(logp_blocks)
        lq = np.stack([logpdf_params(q, all_params) for q in proposals])
        log_q_mix = logsumexp(lq, axis=0) - math.log(len(proposals))
        log_v = log_p - log_q_mix
        if t + 1 < cfg.T:
            if np.any(np.isfinite(log_v)):
                m = log_v.max()
                w = np.exp(log_v - m)
                proposals.append(
                    _refit_component_fallback(proposals[-1], all_params, w)
                )
            else:
                proposals.append(proposals[-1])
    if not np.any(np.isfinite(log_v)):
        raise AllWeightsZero("every sample landed in zero-likelihood territory")
    k_total = cfg.T * cfg.K_prime
    l_pred = float(logsumexp(log_v) - math.log(k_total))
    iteration = np.repeat(np.arange(cfg.T, dtype=np.int64), cfg.K_prime)
    return McBatch(
        q1.space, q1.t_fixed, np.concatenate(blocks, axis=0),
        np.concatenate(logp_blocks), log_v, iteration, tuple(proposals), l_pred,
    )


def expectation(batch, g):
    """Self-normalized posterior expectation of a pose-indexed function."""
    w = batch.normalized_weights()
    acc = None
    for pose, wi in zip(batch.poses, w):
        if wi == 0.0:
            continue
        val = wi * np.asarray(g(pose), dtype=np.float64)
        acc = val if acc is None else acc + val
    return acc


def _score_curve(e, a, b):
    """clamp(-a log e + b, 0, 1); constant b when a = 0."""
    e = np.asarray(e, dtype=np.float64)
    if a == 0.0:
        return np.full(e.shape, float(np.clip(b, 0.0, 1.0)))
    with np.errstate(divide="ignore"):
        s = -a * np.log(e) + b
    return np.clip(s, 0.0, 1.0)


def mc_score(batch, pose_star, a, b):
    """Posterior-weighted pose confidence from ground-plane scatter.

    Each sample contributes Score(|t*_XZ - t_XZ|) with the clamped
    log-linear curve; concentrated posteriors score near 1, dispersed
    ones lower.
    """
    if batch.space == SPACE_YAW1:
        raise ValueError("the score needs a pose space with free translation")
    w = batch.normalized_weights()
    diff = batch.params[:, [0, 2]] - np.asarray(pose_star.t)[[0, 2]]
    e = np.linalg.norm(diff, axis=1)
    return float(w @ _score_curve(e, a, b))


# ---------------------------------------------------------------------------
# dense quadrature oracle for 1-DoF problems


def yaw_grid_loglik(X, t_fixed, n=16384, delta=None):
    """Log-likelihood on a uniform yaw grid (endpoint excluded)."""
    thetas = np.linspace(-np.pi, np.pi, n, endpoint=False)
    if delta is None:
        delta = _flat_delta(X)
    ll = _loglik_rows(X, SPACE_YAW1, thetas[:, None], np.asarray(t_fixed, float), delta)
    return thetas, ll


def yaw_quadrature_lpred(X, t_fixed, n=16384, delta=None):
    """Trapezoid estimate of log integral exp(log p) dtheta on the circle.

    Uniform spacing on a periodic domain makes the trapezoid rule the
    rectangle rule, evaluated stably in the log domain.
    """
    _, ll = yaw_grid_loglik(X, t_fixed, n, delta)
    return float(logsumexp(ll) + math.log(2.0 * np.pi / n))


def yaw_mode_masses(X, t_fixed, n=16384):
    """Posterior modes and their basin masses from the dense grid.

    Peaks are strict local maxima of the log likelihood (circular); each
    basin extends to the adjacent minima; masses are normalized posterior
    mass per basin, sorted by decreasing mass. Returns a list of
    (theta_mode, mass) pairs.
    """
    thetas, ll = yaw_grid_loglik(X, t_fixed, n)
    post = np.exp(ll - logsumexp(ll))
    left = np.roll(ll, 1)
    right = np.roll(ll, -1)
    peaks = np.flatnonzero((ll > left) & (ll >= right))
    if peaks.size == 0:
        return [(float(thetas[int(np.argmax(ll))]), 1.0)]
    valleys = np.flatnonzero((ll < left) & (ll <= right))
    if valleys.size == 0:
        return [(float(thetas[int(np.argmax(ll))]), 1.0)]
    out = []
    vs = np.sort(valleys)
    for p in peaks:
        # basin of this peak: from the previous valley to the next (circular)
        nxt = vs[np.searchsorted(vs, p) % vs.size]
        prv = vs[np.searchsorted(vs, p) - 1]
        if prv < nxt:
            mass = post[prv:nxt].sum()
        else:
            mass = post[prv:].sum() + post[:nxt].sum()
        out.append((float(thetas[p]), float(mass)))
    out.sort(key=lambda kv: -kv[1])
    return out
