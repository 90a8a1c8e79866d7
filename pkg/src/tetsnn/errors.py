"""Exception types shared across the package.

The CLI maps each family to a fixed exit code.
"""


class TetError(Exception):
    pass


class ShapeError(TetError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(TetError, ValueError):
    """Invalid or unknown configuration value."""


class DataError(TetError, ValueError):
    """Malformed or missing dataset files."""


class DivergenceError(TetError, FloatingPointError):
    """Training produced a non-finite loss."""


class NonFiniteError(TetError, ValueError):
    """A neuron received a NaN or infinite input current."""
