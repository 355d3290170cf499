"""Exception hierarchy shared across the package."""


class Dac4RecError(Exception):
    """Base class for all package errors."""


class ContractError(Dac4RecError, ValueError):
    """A caller violated an operation's preconditions (shapes, empty inputs)."""


class ConfigError(Dac4RecError, ValueError):
    """Invalid or conflicting configuration."""


class NonFiniteError(Dac4RecError, FloatingPointError):
    """A loss, gradient or model output became NaN/inf."""

    def __init__(self, message: str, **diagnostics):
        self.diagnostics = diagnostics
        if diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
            message = f"{message} ({details})"
        super().__init__(message)


class SamplingError(NonFiniteError):
    """Reverse diffusion produced a non-finite value at a given step."""


class DatasetLoadError(Dac4RecError, IOError):
    """Base class for dataset file problems."""


class FormatVersionError(DatasetLoadError):
    pass


class TruncatedFileError(DatasetLoadError):
    pass


class ChecksumError(DatasetLoadError):
    pass
