"""Error types named by the contracts they guard."""


class CloudlocError(Exception):
    """Base class for all package errors."""


class ConfigError(CloudlocError):
    """A configuration violates its invariants."""


class BehindCamera(CloudlocError):
    """Projection requested for a point at or behind the minimum depth."""


class EmptyInterval(CloudlocError):
    """Preintegration over fewer than two samples."""


class MissingPreintegration(CloudlocError):
    """No preintegrated IMU between the requested keyframes."""


class SolverDiverged(CloudlocError):
    """Damping exceeded its ceiling without an accepted step."""


class SingularInformation(CloudlocError):
    """Assembled information matrix is numerically singular."""


class SingularBlock(CloudlocError):
    """The removed-variable block cannot be inverted."""


class SingularJacobian(CloudlocError):
    """The virtual-odometry measurement Jacobian is not invertible."""


class StaleMessage(CloudlocError):
    """Submap older than the session's staleness horizon."""


class NonMonotoneTime(CloudlocError):
    """A sample or measurement moved backwards in time."""


class TooOld(CloudlocError):
    """Delayed measurement outside the state buffer horizon."""


class NoOverlap(CloudlocError):
    """Fewer than the minimum number of matched trajectory pairs."""


class ChecksumError(CloudlocError):
    """Wire payload failed its integrity check."""


class DecodeError(CloudlocError):
    """Wire payload is malformed."""
