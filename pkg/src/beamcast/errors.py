"""Exception types raised across the package."""


class BeamcastError(Exception):
    """Base class for all package errors."""


class NoBracket(BeamcastError):
    """Requested arc displacement leaves the track support."""


class EmptyBin(BeamcastError):
    """A track piece (or a metric bin) received no samples."""


class TooClose(BeamcastError):
    """BS-MT distance below the path-loss model validity (1 m)."""


class DegenerateBasis(BeamcastError):
    """Least-squares gain denominator underflowed."""


class NotConverged(BeamcastError):
    """Coordinate descent hit its iteration cap.

    The last iterate is kept on ``estimate`` so callers can still use it.
    """

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class NoGeometricSolution(BeamcastError):
    """Measured delay is shorter than the minimum BS-track delay."""


class SignAmbiguity(BeamcastError):
    """Doppler too close to zero to resolve which side of the BS the MT is on."""


class Diverged(BeamcastError):
    """Training loss blew up."""


class DegenerateSystem(BeamcastError):
    """Normal equations are singular."""


class ParseError(BeamcastError):
    """Malformed configuration line."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class RangeError(BeamcastError):
    """Configuration value violates an invariant."""
