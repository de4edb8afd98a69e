"""Exception hierarchy shared across the simulator."""


class FLRError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(FLRError, ValueError):
    """Invalid shapes, sizes or configuration values."""


class NumericError(FLRError, ArithmeticError):
    """NaN/Inf encountered where finite values are required."""


class StateError(FLRError, RuntimeError):
    """Pseudo-label state used before it was initialized."""


class ProtocolError(FLRError, RuntimeError):
    """Federation protocol violated (e.g. aggregating zero clients)."""
