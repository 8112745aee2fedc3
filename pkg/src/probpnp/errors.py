"""Exception taxonomy.

Every failure mode that callers are expected to branch on gets its own
class; all inherit from ProbPnpError so library users can catch broadly.
"""


class ProbPnpError(Exception):
    """Base class for all probpnp errors."""


class BehindCamera(ProbPnpError):
    """A point's camera-frame depth is at or below the z floor."""

    def __init__(self, z, z_min):
        super().__init__(f"point behind camera: z={z:.6g} <= z_min={z_min:.6g}")
        self.z = z
        self.z_min = z_min


class DegenerateSet(ProbPnpError):
    """Correspondence set cannot support the requested computation
    (zero weight mass, no 2D spread, or too few usable points)."""


class AllPointsInvalid(ProbPnpError):
    """Every correspondence is behind the camera at the given pose."""


class SingularSystem(ProbPnpError):
    """Normal equations stayed singular even after damping escalation."""


class NoValidHypothesis(ProbPnpError):
    """Random-sampling initialization produced no scoreable hypothesis."""


class AllWeightsZero(ProbPnpError):
    """Every importance weight vanished; the estimate is undefined."""


class RankDeficientFit(ProbPnpError):
    """Weighted moment fit is unusable (singular scatter or too little
    effective mass). Carries the computed moments so the caller can
    inflate the scale with a ridge and continue.
    """

    def __init__(self, message, mu=None, sigma=None):
        super().__init__(message)
        self.mu = mu
        self.sigma = sigma


class FitDiverged(ProbPnpError):
    """Fixed-point parameter estimation failed to contract."""


class ProposalCollapse(ProbPnpError):
    """Proposal refit failed and no previous proposal is available."""


class NonFiniteGradient(ProbPnpError):
    """Training step produced a non-finite gradient.

    Carries the partial training trace and a diagnostic dump so callers
    (and the CLI) can persist what happened before the abort.
    """

    def __init__(self, message, step=None, trace=None, dump=None):
        super().__init__(message)
        self.step = step
        self.trace = trace if trace is not None else []
        self.dump = dump if dump is not None else {}
