"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not conform."""


class DomainError(ValueError):
    """An argument lies outside the domain of a function (e.g. a negative probability)."""


class ConfigurationError(ValueError):
    """A model or run configuration violates a structural constraint."""


class TrainingError(RuntimeError):
    """Training cannot proceed (degenerate batch, non-finite gradient)."""
