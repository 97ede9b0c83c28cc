"""Exception hierarchy shared across the package.

Solver errors carry enough context (seed, hybrid time) to diagnose batch
runs where a single trajectory fails while the rest continue.
"""


class SynseekError(Exception):
    """Base class for all package errors."""


class ConfigInvalid(SynseekError):
    """A scenario or run configuration failed validation."""


# --- solver -----------------------------------------------------------------

class SolverError(SynseekError):
    """Base class for errors raised while producing a hybrid arc."""

    def __init__(self, msg, t=None, j=None, seed=None):
        if t is not None:
            msg = f"{msg} (t={t:.6g}, j={j}, seed={seed})"
        super().__init__(msg)
        self.t = t
        self.j = j
        self.seed = seed


class ZenoGuardTripped(SolverError):
    """Too many jumps inside the configured time window."""


class DeadlockState(SolverError):
    """State left the flow set (beyond tolerance) without entering the jump set."""


class NonFiniteState(SolverError):
    """NaN or Inf appeared during integration."""


class PreconditionViolated(SynseekError):
    """An operation was called on a state outside its documented domain."""


# --- geometry ---------------------------------------------------------------

class NotARotation(SynseekError):
    """A 9-vector or 3x3 matrix is too far from SO(3)."""


class TooFarFromManifold(SynseekError):
    """Projection requested from a point outside the trusted band."""


class InsideObstacleMargin(SynseekError):
    """Planar point inside the obstacle margin; the log-polar map is undefined."""


class EmptySet(SynseekError):
    """Distance to an empty target set was requested."""


# --- potentials -------------------------------------------------------------

class BadDelta(SynseekError):
    """Synergy parameter outside the admissible interval for the family."""


class NotOrthogonal(SynseekError):
    """Auxiliary axis is not orthogonal to the target point."""


class NoCriticalPointsFound(SynseekError):
    """Synergy-gap search found no off-target critical points (resolution too coarse?)."""


# --- arcs / reporting -------------------------------------------------------

class MissingChannel(SynseekError):
    """A named per-sample channel is absent from the arc."""
