"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all engine-raised errors."""


class ShapeError(EngineError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(EngineError):
    """An operation produced a non-finite value (NaN/Inf) in strict mode."""


class GraphFormatError(EngineError):
    """A graph input file is malformed or inconsistent."""


class ProgramError(EngineError):
    """A layer program violates a placeholder scope or shape rule."""


class BudgetError(EngineError):
    """The device memory budget cannot be satisfied."""


class ConfigError(EngineError):
    """A run configuration is missing or invalid."""
