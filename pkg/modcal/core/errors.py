"""
Exception hierarchy shared by all modcal modules.
"""

from typing import Optional


class ModcalError(Exception):
    """Base class for every error raised by modcal."""

    exit_code = 1


class ConfigurationError(ModcalError):
    """A configuration value or combination of values is invalid."""

    exit_code = 2


class InputError(ModcalError):
    """An input tensor or argument does not match what the operation expects."""


class LoadError(ModcalError):
    """A persisted artifact is corrupt or incomplete."""

    def __init__(self, message: str, record: Optional[int] = None):
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)
        self.record = record


class StateError(ModcalError):
    """A prerequisite stage or artifact is missing."""


class NumericError(ModcalError):
    """A loss or tensor became non-finite."""

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step
