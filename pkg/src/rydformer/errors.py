"""Exception types shared across the package.

CLI exit-code mapping: InvalidArgument/ResourceLimit -> 2,
ArtifactMismatch -> 3, NumericalFailure -> 4.
"""


class InvalidArgumentError(ValueError):
    """Bad user input: shapes, ranges, malformed configs."""


class ResourceLimitError(InvalidArgumentError):
    """Requested system size exceeds a documented cap."""


class ArtifactMismatchError(RuntimeError):
    """Checkpoint/architecture disagreement (named tensors do not line up)."""


class NumericalFailureError(RuntimeError):
    """Non-convergence, NaN, or other numerical breakdown."""
