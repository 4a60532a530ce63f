"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class DegenerateBasisError(InvalidInputError):
    """The up vector is (anti)parallel to a ray, so no ray-local frame exists."""


class AlignmentError(ValueError):
    """Similarity alignment is undetermined (too few or collinear points)."""


class SamplingError(RuntimeError):
    """Rejection sampling exhausted its draw budget."""
