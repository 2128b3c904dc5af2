"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration: bad file, inconsistent knobs, CFL violation."""


class DomainError(ValueError):
    """A state left the validity domain of a vector field."""


class DivergenceError(RuntimeError):
    """A trajectory exceeded the blow-up bound during integration."""

    def __init__(self, message: str, time: float | None = None):
        super().__init__(message)
        self.time = time


class MonotonicityError(RuntimeError):
    """The descent produced a cost increase beyond tolerance.

    Indicates a time/particle discretization too coarse for the sampled
    feedback scheme; refine the partition or the substeps.
    """
