"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition or invariant of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (timestep {step})")
        self.step = step


class IntegrityError(IOError):
    """A persisted artifact failed its magic/version/CRC check."""


class ConfigError(ValueError):
    """A run configuration could not be parsed or validated."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
