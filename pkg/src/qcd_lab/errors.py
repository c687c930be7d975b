"""Exception types shared across the package."""


class InvalidParameter(ValueError):
    """A parameter violates a documented precondition."""


class BoundInapplicable(ValueError):
    """The delay bound or approximation requires a positive post-change drift."""


class CalibrationFailed(RuntimeError):
    """Threshold calibration could not bracket the target ARL."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ConfigError(ValueError):
    """An experiment configuration is malformed or violates an invariant."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
