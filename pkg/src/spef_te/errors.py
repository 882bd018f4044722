"""Exception hierarchy shared by all spef_te modules."""


class SpefError(Exception):
    """Base class for every error raised by spef_te."""


class StructuralError(SpefError, ValueError):
    """Input references unknown nodes/links or has an impossible shape."""


class DomainError(SpefError, ValueError):
    """A numeric argument lies outside the domain of a function."""


class RoutingError(SpefError):
    """Some positive demand cannot reach its destination."""


class InfeasibleDemandError(SpefError):
    """The network cannot carry the offered demand."""


class SamplingError(SpefError):
    """No feasible random flow could be generated for a balance check."""


class ConfigError(SpefError, ValueError):
    """Configuration, file format, or IO problem."""


class StageError(SpefError):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: Exception) -> None:
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
