"""Exception types shared across the package."""


class InvalidDimensionError(ValueError):
    pass


class PathlossSingularityError(ValueError):
    pass


class TotalInternalReflectionError(ValueError):
    pass


class InvalidActionError(ValueError):
    pass


class ContractViolation(RuntimeError):
    """Raised when a caller breaks a documented precondition (stale cache, non-Hermitian input)."""


class ConfigError(ValueError):
    pass
