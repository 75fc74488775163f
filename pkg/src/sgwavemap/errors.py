"""Exception types shared across the package."""


class SimulationError(Exception):
    """Base class for numerical aborts (CLI exit code 3)."""


class DeficitAngleExceeded(SimulationError):
    """alpha * E(t, r) / (2 pi) reached 1, so e^{-gamma} hit zero."""

    def __init__(self, message, index=None, r=None):
        super().__init__(message)
        self.index = index
        self.r = r


class CflViolation(SimulationError):
    pass


class NonFiniteState(SimulationError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class BoundaryTime(ValueError):
    """Requested time needs neighbours on both sides in the history."""


class BracketInvalid(ValueError):
    def __init__(self, message, low_verdict=None, high_verdict=None):
        super().__init__(message)
        self.low_verdict = low_verdict
        self.high_verdict = high_verdict


class ConeExitsGrid(SimulationError):
    pass


class CharacteristicExitsGrid(SimulationError):
    pass


class FrameUnavailable(RuntimeError):
    pass


class ConfigError(ValueError):
    """Invalid or incomplete run configuration (CLI exit code 2)."""
