"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor or layer received data of an incompatible shape."""


class ContractError(ValueError):
    """An operation was called in a way that violates its contract."""


class ValidationError(ValueError):
    """Input data failed schema or consistency checks."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent or incomplete."""


class TrainingError(RuntimeError):
    """Training aborted (e.g. non-finite loss)."""
