"""Exception types shared across the package."""


class CapaplanError(Exception):
    """Base class for all package errors."""


class ModelFormatError(CapaplanError, ValueError):
    """Malformed or rejected input: files, configs, graph data."""


class PathError(CapaplanError, ValueError):
    """A path is not consistent with the model it is evaluated on."""


class StrategyDomainError(CapaplanError, LookupError):
    """A strategy has no choice for a (state, level) pair that was reached."""

    def __init__(self, state_name: str, level: int):
        super().__init__(f"strategy undefined at state {state_name!r}, level {level}")
        self.state_name = state_name
        self.level = level


class PreconditionError(CapaplanError, ValueError):
    """An operation was called with arguments that violate its contract."""


class InfeasibleError(CapaplanError):
    """The planning instance admits no solution at any finite capacity."""

    def __init__(self, message: str, pair: tuple[str, str] | None = None):
        super().__init__(message)
        self.pair = pair


class InternalError(CapaplanError, RuntimeError):
    """An internal invariant was violated; indicates a bug, not bad input."""
