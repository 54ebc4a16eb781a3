"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An operation received data violating its preconditions."""


class InvalidConfigError(ValueError):
    """A configuration value is out of range, malformed, or unknown."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but numerically unusable
    (zero-norm vector, zero confidence entry)."""


class UsageError(RuntimeError):
    """An API was driven out of order (e.g. backward without forward)."""


class TrainingDivergedError(RuntimeError):
    """A non-finite loss or gradient was encountered.

    Carries the per-component loss breakdown so the caller can dump
    diagnostics before aborting.
    """

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = dict(components or {})
