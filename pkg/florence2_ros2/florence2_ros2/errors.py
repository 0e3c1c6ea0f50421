"""
Error codes and exceptions shared by every layer of the Florence-2 bridge.
Handlers convert these into in-band failure responses; nothing here is
allowed to cross the middleware boundary as an exception.
"""

from enum import Enum
from typing import Optional


class ErrorCode(str, Enum):
    UNKNOWN_TASK = "UNKNOWN_TASK"
    NO_IMAGE_AVAILABLE = "NO_IMAGE_AVAILABLE"
    MISSING_TEXT_INPUT = "MISSING_TEXT_INPUT"
    AMBIGUOUS_IMAGE_SOURCE = "AMBIGUOUS_IMAGE_SOURCE"
    GPU_UNAVAILABLE = "GPU_UNAVAILABLE"
    MODEL_NOT_FOUND = "MODEL_NOT_FOUND"
    OUT_OF_MEMORY = "OUT_OF_MEMORY"
    INFERENCE_FAILURE = "INFERENCE_FAILURE"
    SCHEMA_MISMATCH = "SCHEMA_MISMATCH"
    SCHEMA_ERROR = "SCHEMA_ERROR"
    WRONG_OUTPUT_KIND = "WRONG_OUTPUT_KIND"
    UNSUPPORTED_ENCODING = "UNSUPPORTED_ENCODING"
    MALFORMED_IMAGE = "MALFORMED_IMAGE"
    BUSY = "BUSY"
    CANCELED = "CANCELED"
    REENTRANT_INFERENCE = "REENTRANT_INFERENCE"
    TIMEOUT = "TIMEOUT"
    NODE_UNREACHABLE = "NODE_UNREACHABLE"
    STREAM_EMPTY = "STREAM_EMPTY"
    NODE_NOT_PROCESSING = "NODE_NOT_PROCESSING"
    CONFIG_INVALID = "CONFIG_INVALID"

    def __str__(self) -> str:
        return self.value


class Florence2Error(Exception):
    """Base error carrying a machine-readable code plus optional details."""

    def __init__(self, code: ErrorCode, message: str = "", details: Optional[dict] = None):
        self.code = ErrorCode(code)
        self.message = message
        self.details = details or {}
        super().__init__(self.describe())

    def describe(self) -> str:
        """Render as '<CODE>' or '<CODE>: <message>' for error_message fields."""
        if self.message:
            return f"{self.code.value}: {self.message}"
        return self.code.value


class ValidationError(Florence2Error):
    pass


class BackendError(Florence2Error):
    pass


class SchemaError(Florence2Error):
    """Raised when a document or subtree violates the result schema."""

    def __init__(self, code: ErrorCode, message: str, path: str = "$"):
        self.path = path
        super().__init__(code, f"{message} (at {path})", {"path": path})


class ConversionError(Florence2Error):
    pass


class ConfigError(Florence2Error):
    def __init__(self, message: str):
        super().__init__(ErrorCode.CONFIG_INVALID, message)


def error_message(exc: BaseException) -> str:
    """Map any exception to a non-empty error_message string."""
    if isinstance(exc, Florence2Error):
        return exc.describe()
    text = str(exc) or exc.__class__.__name__
    return f"{ErrorCode.INFERENCE_FAILURE.value}: {text}"
