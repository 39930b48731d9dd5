"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition on inputs was violated."""


class ConfigurationError(ValueError):
    """A configuration value is invalid or contradicts another."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class ParseError(ValueError):
    """A data file could not be parsed."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line
