"""Exception types raised across the package."""


class DegenerateStateError(ValueError):
    """A state with zero (or non-finite) norm was supplied."""


class GridMismatchError(ValueError):
    """Two objects that must share a grid do not."""


class GuardrailError(ValueError):
    """A propagator configuration violates the documented stability limits."""


class PostSelectionError(ValueError):
    """The post-selection overlap is too small for a weak value to be defined."""


class EscapeError(RuntimeError):
    """Too many trajectories left the region where the velocity field is defined."""


class BinningError(ValueError):
    """Estimates or records are not binned consistently."""


class CovarianceUndefinedError(ValueError):
    """The covariance test is meaningless on a stationary scenario."""
