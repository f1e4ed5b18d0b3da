"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates an operation's precondition."""


class DegenerateRotationError(ValueError):
    """A 6D rotation has zero or parallel columns."""


class OutOfRangeError(IndexError):
    """An index or horizon runs past the end of a sequence."""


class IllegalStateError(RuntimeError):
    """Operation is not allowed in the current state (e.g. stepping a terminated sim)."""


class GenerationError(RuntimeError):
    """Procedural generation could not satisfy its constraints."""


class ConfigError(ValueError):
    """Configuration is infeasible, incomplete, or references missing artifacts."""


class IncompatibilityError(RuntimeError):
    """Persisted artifacts were produced by incompatible components (checksum mismatch)."""
