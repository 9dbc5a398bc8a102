"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid hyperparameters, environment ids or other configuration."""


class ContractError(ValueError):
    """A caller violated an operation's input contract (shapes, emptiness)."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of a function."""


class NumericalGuardError(ArithmeticError):
    """A quantity fell into a numerically unsafe region."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable or incompatible with this build."""


class SchemaError(ValueError):
    """A dataset, report or config file does not follow its schema."""
