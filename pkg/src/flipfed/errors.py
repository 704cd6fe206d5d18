"""Exception types shared across the simulator."""


class FlipFedError(Exception):
    """Base class for all simulator errors."""


class DimensionError(FlipFedError, ValueError):
    """Tensor or parameter shapes do not line up."""


class NumericError(FlipFedError, FloatingPointError):
    """A loss or gradient became non-finite.

    ``where`` carries the offending layer index, optimisation step or
    iteration, whichever the raising code knows about.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class ConfigError(FlipFedError, ValueError):
    """Invalid configuration value or combination."""


class PreconditionError(FlipFedError, ValueError):
    """An aggregation rule's precondition does not hold for this round."""


class DefenseInapplicableError(FlipFedError, ValueError):
    """The defense cannot run on this architecture."""
