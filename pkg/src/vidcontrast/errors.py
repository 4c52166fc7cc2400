"""Exception hierarchy shared across the package."""


class VidContrastError(Exception):
    pass


class DimensionError(VidContrastError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(VidContrastError, ValueError):
    """A caller violated a documented precondition."""


class ConfigError(VidContrastError, ValueError):
    """Invalid configuration value or combination of values."""


class DataError(VidContrastError, ValueError):
    """Malformed or inconsistent input data (files, corpora, logs)."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateVectorError(VidContrastError, ArithmeticError):
    pass


class EmptyQueueError(VidContrastError, LookupError):
    pass


class NonFiniteError(VidContrastError, FloatingPointError):
    """Raised when a tensor or loss holds NaN/Inf values."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
