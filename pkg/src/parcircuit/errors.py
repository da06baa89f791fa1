"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions incompatible with the requested operation."""


class ParameterError(ValueError):
    """Scalar argument outside its valid range."""


class PolicyError(ValueError):
    """Dropout policy misused (wrong granularity, k too small, ...)."""


class ConsistencyError(ValueError):
    """Paired inputs describe different objects (trace vs params, counts)."""


class DataError(ValueError):
    """Dataset-level problem: empty set, duplicate ids, bad labels."""


class FormatError(ValueError):
    """File content does not match the expected format."""


class ConfigError(ValueError):
    """Experiment configuration invalid or unresolvable."""


class BenchError(RuntimeError):
    """One or more benchmark trials failed; partial results persisted."""
