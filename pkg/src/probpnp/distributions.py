"""Decoupled proposal distributions over pose.

Position uses a trivariate t-distribution (heavy tails for robust
importance sampling); orientation uses a von Mises + uniform mixture on
the yaw circle, or an angular central Gaussian (ACG) on the quaternion
sphere S^3. Each family provides pdf/log-pdf, sampling, moment-based
refitting from weighted samples, and initialization from a solver result.

Conventions: quaternions are (w, x, y, z) scalar-first unit vectors; the
ACG is antipodally symmetric, matching the two-to-one quaternion cover of
rotations. Fit routines raise `RankDeficientFit` (with the computed
moments attached) rather than returning unusable parameters; the AMIS
driver inflates and retries.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, i0e

from .errors import FitDiverged, RankDeficientFit
from .geometry import (
    SPACE_QUAT6,
    SPACE_YAW1,
    SPACE_YAW4,
    Quat6DoF,
    Yaw4DoF,
    YawOnly,
    normalize_angle,
    pose_from_params,
    quat_tangent_basis,
)

LOG_2PI2 = math.log(2.0 * math.pi * math.pi)  # log surface area of S^3

_VMU_ALPHA = 0.25
_KAPPA_CAP = 1e6
_ACG_DISPERSION = 1e-3


def _sym_pd_chol(mat, name):
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape != (mat.shape[0],) * 2 or np.abs(mat - mat.T).max() > 1e-8:
        raise ValueError(f"{name} must be symmetric, got\n{mat}")
    try:
        return np.linalg.cholesky(0.5 * (mat + mat.T))
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None


@dataclass(frozen=True)
class MvtParams:
    """Trivariate t-distribution: location, scale matrix, degrees of freedom.

    Note the scale matrix is not the covariance; for nu > 2 the covariance
    is nu/(nu-2) * sigma, a deliberate tail inflation.
    """

    mu: np.ndarray
    sigma: np.ndarray
    nu: float = 3.0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=np.float64))
        _sym_pd_chol(self.sigma, "sigma")
        if not self.nu > 1:
            raise ValueError(f"nu must exceed 1, got {self.nu}")


@dataclass(frozen=True)
class VmuParams:
    """Yaw proposal: von Mises mixed with a uniform floor on the circle."""

    mu: float
    kappa: float
    alpha: float = _VMU_ALPHA

    def __post_init__(self):
        object.__setattr__(self, "mu", float(normalize_angle(self.mu)))
        if not (self.kappa >= 0 and math.isfinite(self.kappa)):
            raise ValueError(f"kappa must be >= 0 and finite, got {self.kappa}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class AcgParams:
    """Angular central Gaussian on S^3 with 4x4 SPD parameter ``lam``.

    The density is invariant under positive scaling of ``lam``
    (identifiable up to scale only); fits are trace-normalized to 4.
    """

    lam: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=np.float64)
        if lam.shape != (4, 4):
            raise ValueError(f"lam must be 4x4, got {lam.shape}")
        _sym_pd_chol(lam, "lam")
        object.__setattr__(self, "lam", lam)


@dataclass(frozen=True)
class Proposal:
    """Product proposal over a pose space.

    ``position`` is None for the yaw-only space (translation pinned to
    ``t_fixed``); ``orientation`` is VmuParams for yaw spaces, AcgParams
    for the quaternion space.
    """

    space: str
    position: object
    orientation: object
    t_fixed: np.ndarray = None

    def __post_init__(self):
        if self.space == SPACE_YAW1:
            if self.position is not None or self.t_fixed is None:
                raise ValueError("yaw-only proposal has no position part and needs t_fixed")
            if not isinstance(self.orientation, VmuParams):
                raise ValueError("yaw-only proposal needs VmuParams orientation")
        elif self.space == SPACE_YAW4:
            if not isinstance(self.position, MvtParams) or not isinstance(
                self.orientation, VmuParams
            ):
                raise ValueError("yaw+t proposal needs MvtParams and VmuParams")
        elif self.space == SPACE_QUAT6:
            if not isinstance(self.position, MvtParams) or not isinstance(
                self.orientation, AcgParams
            ):
                raise ValueError("quaternion proposal needs MvtParams and AcgParams")
        else:
            raise ValueError(f"unknown pose space {self.space!r}")
        if self.t_fixed is not None:
            object.__setattr__(
                self, "t_fixed", np.asarray(self.t_fixed, dtype=np.float64).reshape(3)
            )


# ---------------------------------------------------------------------------
# multivariate t


def mvt_logpdf(p, t):
    """Log density at ``t`` (shape (3,) or (K, 3))."""
    t = np.asarray(t, dtype=np.float64)
    single = t.ndim == 1
    pts = np.atleast_2d(t) - p.mu
    L = _sym_pd_chol(p.sigma, "sigma")
    y = np.linalg.solve(L, pts.T)
    d2 = (y * y).sum(axis=0)
    nu = p.nu
    out = (
        gammaln(0.5 * (nu + 3.0))
        - gammaln(0.5 * nu)
        - 1.5 * math.log(nu * math.pi)
        - np.log(np.diag(L)).sum()
        - 0.5 * (nu + 3.0) * np.log1p(d2 / nu)
    )
    return float(out[0]) if single else out


def mvt_pdf(p, t):
    return np.exp(mvt_logpdf(p, t))


def mvt_sample(p, rng, k):
    """Draw k samples: scaled normal divided by sqrt(chi^2_nu / nu)."""
    L = _sym_pd_chol(p.sigma, "sigma")
    z = rng.standard_normal((k, 3)) @ L.T
    g = rng.chisquare(p.nu, size=k)
    return p.mu + z / np.sqrt(g / p.nu)[:, None]


def mvt_fit(samples, weights, nu=3.0):
    """Weighted first/second moments as location and scale.

    Raises `RankDeficientFit` (moments attached) when the weight mass is
    too small, too concentrated (< 4 effective samples), or the scatter
    matrix is singular.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    total = weights.sum()
    if not total > 0:
        raise RankDeficientFit("no weight mass to fit a position proposal")
    ess = total * total / float((weights * weights).sum())
    v = weights / total
    mu = v @ samples
    centered = samples - mu
    sigma = (centered * v[:, None]).T @ centered
    sigma = 0.5 * (sigma + sigma.T)
    if ess < 4.0:
        raise RankDeficientFit(
            f"only {ess:.2f} effective samples for a 3x3 scale fit", mu=mu, sigma=sigma
        )
    try:
        np.linalg.cholesky(sigma + 0.0)
    except np.linalg.LinAlgError:
        raise RankDeficientFit("singular weighted scatter", mu=mu, sigma=sigma) from None
    return MvtParams(mu, sigma, nu)


# ---------------------------------------------------------------------------
# von Mises + uniform mixture


def vmu_logpdf(p, theta):
    """Log density on the circle at ``theta`` (scalar or array)."""
    theta = np.asarray(theta, dtype=np.float64)
    single = theta.ndim == 0
    d = np.atleast_1d(theta) - p.mu
    # exp(k cos d) / I0(k) == exp(k (cos d - 1)) / i0e(k), overflow-free
    vm = np.exp(p.kappa * (np.cos(d) - 1.0)) / i0e(p.kappa)
    mix = (1.0 - p.alpha) * vm + p.alpha
    with np.errstate(divide="ignore"):
        out = np.log(mix) - math.log(2.0 * math.pi)
    return float(out[0]) if single else out


def vmu_pdf(p, theta):
    return np.exp(vmu_logpdf(p, theta))


def vmu_sample(p, rng, k):
    """Draw k angles; the uniform component fires with probability alpha."""
    out = normalize_angle(rng.vonmises(p.mu, max(p.kappa, 1e-12), size=k))
    uniform = rng.random(k) < p.alpha
    n_u = int(uniform.sum())
    if n_u:
        out[uniform] = rng.uniform(-np.pi, np.pi, size=n_u)
    return out


def vmu_fit(samples, weights, alpha=_VMU_ALPHA):
    """Circular weighted mean plus moment-matched concentration.

    kappa_hat = rbar (2 - rbar^2) / (1 - rbar^2), capped at 1e6, then
    deliberately spread by a factor 3 (kappa = kappa_hat / 3).
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    total = weights.sum()
    if not total > 0:
        raise RankDeficientFit("no weight mass to fit a yaw proposal")
    c = float(weights @ np.cos(samples)) / total
    s = float(weights @ np.sin(samples)) / total
    mu = math.atan2(s, c)
    rbar = min(math.hypot(c, s), 1.0 - 1e-15)
    kappa_hat = min(rbar * (2.0 - rbar * rbar) / (1.0 - rbar * rbar), _KAPPA_CAP)
    return VmuParams(mu, kappa_hat / 3.0, alpha)


# ---------------------------------------------------------------------------
# angular central Gaussian on S^3


def acg_logpdf(p, l):
    """Log density on S^3 at unit 4-vectors ``l`` (shape (4,) or (K, 4))."""
    l = np.asarray(l, dtype=np.float64)
    single = l.ndim == 1
    ls = np.atleast_2d(l)
    L = _sym_pd_chol(p.lam, "lam")
    y = np.linalg.solve(L, ls.T)
    quad = (y * y).sum(axis=0)
    out = -2.0 * np.log(quad) - LOG_2PI2 - np.log(np.diag(L)).sum()
    return float(out[0]) if single else out


def acg_pdf(p, l):
    return np.exp(acg_logpdf(p, l))


def acg_sample(p, rng, k):
    """Normalize draws from N(0, lam) onto the sphere."""
    L = _sym_pd_chol(p.lam, "lam")
    z = rng.standard_normal((k, 4)) @ L.T
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def acg_fit(samples, weights, alpha_disp=_ACG_DISPERSION, tol=1e-8, max_iter=100):
    """Weighted maximum likelihood via fixed-point iteration.

    Each iterate is trace-normalized to 4 (the density only identifies
    ``lam`` up to scale). After convergence the result is spread by
    ``alpha_disp * det(lam)^(1/4) * I``; pass ``alpha_disp=0`` for the raw
    MLE (used by the stationarity tests).
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 4)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    total = weights.sum()
    if not total > 0:
        raise RankDeficientFit("no weight mass to fit an orientation proposal")
    ess = total * total / float((weights * weights).sum())
    if ess < 5.0:
        raise RankDeficientFit(f"only {ess:.2f} effective samples for an S^3 fit")
    v = weights / total
    lam = np.eye(4)
    for _ in range(max_iter):
        try:
            y = np.linalg.solve(lam, samples.T)
        except np.linalg.LinAlgError:
            raise FitDiverged("fixed-point iterate became singular") from None
        quad = (samples.T * y).sum(axis=0)
        if np.any(quad <= 0):
            raise FitDiverged("fixed-point iterate lost positive definiteness")
        w_eff = v / quad
        new = 4.0 * (samples.T * w_eff) @ samples
        new *= 4.0 / np.trace(new)
        new = 0.5 * (new + new.T)
        delta = float(np.linalg.norm(new - lam))
        lam = new
        if delta < tol:
            break
    else:
        raise FitDiverged(f"no contraction after {max_iter} iterations (last step {delta:.3g})")
    if alpha_disp:
        det = float(np.linalg.det(lam))
        lam = lam + alpha_disp * det**0.25 * np.eye(4)
    return AcgParams(lam)


# ---------------------------------------------------------------------------
# proposal-level API


def _acg_from_tangent(q_star, cov_rot, alpha_disp=_ACG_DISPERSION):
    """Embed a 3x3 rotation-tangent covariance as an ACG parameter.

    The tangent information T Sigma^-1 T' is zero along q_star, so
    lam_hat = (info + I)^-1 keeps q_star as its top eigenvector while the
    tangent directions shrink with their information content.
    """
    T = quat_tangent_basis(q_star)
    info = T @ np.linalg.solve(cov_rot, T.T)
    lam_hat = np.linalg.inv(info + np.eye(4))
    lam_hat = 0.5 * (lam_hat + lam_hat.T)
    det = float(np.linalg.det(lam_hat))
    return AcgParams(lam_hat + alpha_disp * det**0.25 * np.eye(4))


def init_proposal(result, pose_space=None):
    """Build the first importance proposal from a solver result.

    Position: t location = t*, scale = translation covariance block.
    Yaw: von Mises at theta* with kappa = 1 / (3 var(theta*)).
    Quaternion: ACG from the rotation-tangent covariance block.
    """
    pose = result.pose_star
    if pose_space is not None and pose_space != pose.space:
        raise ValueError(f"solve is in {pose.space!r}, requested {pose_space!r}")
    cov = result.covariance
    if pose.space == SPACE_YAW1:
        kappa = 1.0 / (3.0 * max(float(cov[0, 0]), 1e-300))
        return Proposal(
            SPACE_YAW1,
            None,
            VmuParams(pose.theta, min(kappa, _KAPPA_CAP)),
            t_fixed=pose.t_fixed,
        )
    position = MvtParams(pose.t, 0.5 * (cov[:3, :3] + cov[:3, :3].T))
    if pose.space == SPACE_YAW4:
        kappa = 1.0 / (3.0 * max(float(cov[3, 3]), 1e-300))
        return Proposal(SPACE_YAW4, position, VmuParams(pose.theta, min(kappa, _KAPPA_CAP)))
    return Proposal(SPACE_QUAT6, position, _acg_from_tangent(pose.q, cov[3:, 3:]))


def refit_proposal(q, params, weights):
    """Refit every component of ``q`` from weighted pose parameter rows.

    ``params`` holds raw pose parameter rows matching ``q.space`` (the
    layout produced by `sample_params`).
    """
    if q.space == SPACE_YAW1:
        return Proposal(
            SPACE_YAW1, None, vmu_fit(params[:, 0], weights), t_fixed=q.t_fixed
        )
    position = mvt_fit(params[:, :3], weights)
    if q.space == SPACE_YAW4:
        return Proposal(SPACE_YAW4, position, vmu_fit(params[:, 3], weights))
    return Proposal(SPACE_QUAT6, position, acg_fit(params[:, 3:], weights))


def logpdf_params(q, params):
    """Vectorized proposal log density over raw pose parameter rows."""
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    if q.space == SPACE_YAW1:
        return vmu_logpdf(q.orientation, params[:, 0])
    pos = mvt_logpdf(q.position, params[:, :3])
    if q.space == SPACE_YAW4:
        return pos + vmu_logpdf(q.orientation, params[:, 3])
    return pos + acg_logpdf(q.orientation, params[:, 3:])


def sample_params(q, rng, k):
    """Draw k raw pose parameter rows from the proposal."""
    if q.space == SPACE_YAW1:
        return vmu_sample(q.orientation, rng, k)[:, None]
    t = mvt_sample(q.position, rng, k)
    if q.space == SPACE_YAW4:
        theta = vmu_sample(q.orientation, rng, k)
        return np.concatenate([t, theta[:, None]], axis=1)
    l = acg_sample(q.orientation, rng, k)
    return np.concatenate([t, l], axis=1)


def proposal_logpdf(q, pose):
    """Log proposal density of a pose (sum of component log densities)."""
    if pose.space != q.space:
        raise ValueError(f"pose space {pose.space!r} does not match proposal {q.space!r}")
    return float(logpdf_params(q, pose.params[None])[0])


def proposal_sample(q, rng, k):
    """Draw k poses from the proposal."""
    rows = sample_params(q, rng, k)
    return [pose_from_params(q.space, row, q.t_fixed) for row in rows]
