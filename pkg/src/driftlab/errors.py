"""Exception types shared across the toolkit.

Everything raised on purpose derives from DriftlabError so callers (and the
CLI) can distinguish tool failures from plain bugs.
"""


class DriftlabError(Exception):
    """Base class for all driftlab errors."""


class ConfigError(DriftlabError):
    """Bad or unknown configuration input (unknown keys, wrong types, bad paths)."""


class DimensionMismatch(DriftlabError):
    """Array shapes disagree (tape seeds, net inputs, dataset columns)."""


class NonFiniteValue(DriftlabError):
    """NaN or Inf showed up in a forward value or gradient."""


class DegenerateVelocity(DriftlabError):
    """|V_x| fell below the slip-kinematics guard; slips are undefined."""


class PathSingularity(DriftlabError):
    """|1 - e*kappa_ref| is too small; curvilinear rates blow up."""


class SingularInversion(DriftlabError):
    """Force-inversion system is ill-conditioned at one or more samples."""


class NoInteriorExtremum(DriftlabError):
    """ExpTanh coefficients admit no interior stationary point (atanh arg >= 1)."""


class DegenerateScale(DriftlabError):
    """Force-split outputs (s1, s2) are both ~0; the split direction is undefined."""


class NonFiniteState(DriftlabError):
    """An integrated trajectory left the finite range (ODE solve diverged)."""


class NonFiniteLoss(DriftlabError):
    """Training loss evaluated to NaN/Inf."""


class DivergedTraining(DriftlabError):
    """Training loss diverged (non-finite loss or parameters)."""


class DistillationStall(DriftlabError):
    """Distilled-network loss plateaued above the configured threshold."""


class NoConvergence(DriftlabError):
    """Iterative solver failed to converge; message carries the residual."""


class NonFinitePrediction(DriftlabError):
    """NMPC rollout produced a non-finite predicted state."""


class InfeasibleGeometry(DriftlabError):
    """Reference geometry cannot be assembled (negative lengths, bad curvature)."""
