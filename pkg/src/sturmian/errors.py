"""Exception hierarchy.

Validation errors (bad inputs, unmet preconditions) derive from ValueError so
callers can catch them generically; numeric failures (precision exhausted,
root isolation inconsistent, retry caps) derive from RuntimeError. The CLI
maps the former to exit code 2 and the latter to exit code 3.
"""


class SturmianError(Exception):
    """Base class for all package-specific errors."""


class SpecificationError(SturmianError, ValueError):
    """Invalid input or violated precondition."""


class CoefficientUndefinedError(SpecificationError):
    """A continued-fraction coefficient beyond the defined range was requested."""


class WindowTooSmallError(SpecificationError):
    """Lattice window cannot hold the light cone of the requested evolution."""


class CoverageError(SpecificationError):
    """Time samples do not cover the range required by an Abel average."""


class NumericError(SturmianError, RuntimeError):
    """A numeric procedure failed to deliver a certified result."""


class PrecisionError(NumericError):
    """Requested precision could not be reached."""


class ChildCountMismatchError(NumericError):
    """Root isolation found the wrong number of sub-bands after max refinement."""

    def __init__(self, message, word=None):
        super().__init__(message)
        self.word = word


class RetryLimitError(NumericError):
    """A resampling retry cap was exhausted."""
