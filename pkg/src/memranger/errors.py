"""Exception types shared across the simulator."""


class ConfigError(Exception):
    """Invalid static configuration: overlapping regions, unknown ids, bad ranges."""


class SimulationError(Exception):
    """Runtime failure while driving the simulation (bad refs, denied access)."""


class PolicyLivelockError(SimulationError):
    """A single access kept bouncing between EPTs past the retry budget."""


class FrameFault(SimulationError):
    """Byte access to a physical frame that is not mapped."""


class TraceParseError(ValueError):
    """Malformed trace input; carries the 1-based line number."""

    def __init__(self, message: str, line: int = 0):
        super().__init__(message)
        self.line = line
