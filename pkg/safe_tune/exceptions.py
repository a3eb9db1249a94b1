# safe_tune/exceptions.py

# Every failure raised by the package derives from SafeTuneError (a RuntimeError).
# exit_code is what the CLI returns when the error reaches it.

from typing import Optional


class SafeTuneError(RuntimeError):
    """Base class for all safe_tune failures."""

    exit_code = 2


class ShapeError(SafeTuneError, ValueError):
    """Operand shapes do not conform to the primitive or model contract."""


class NumericError(SafeTuneError):
    """A computation produced NaN or Inf."""


class EngineError(SafeTuneError):
    """Misuse of the tape (backward without grad tracking, cut violations, accounting drift)."""


class ContractError(SafeTuneError):
    """A scheduler/engine contract was breached (e.g. gradient for a frozen adapter)."""


class ConfigError(SafeTuneError):
    exit_code = 1


class DatasetError(SafeTuneError):
    exit_code = 1

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(SafeTuneError):
    exit_code = 3


class RunIOError(SafeTuneError):
    exit_code = 3
