# errors.py — exception hierarchy shared by every pipeline module

from __future__ import annotations

from typing import Optional


class MosaeError(Exception):
    """Root of every error raised by the pipeline."""


class ContractError(MosaeError, ValueError):
    """A precondition, shape or parameter-range check failed."""


class SingularMatrixError(MosaeError, ArithmeticError):
    pass


class DataFormatError(MosaeError, ValueError):
    """Malformed dataset file. `line` is 1-based and counts the header row."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DivergenceError(MosaeError, RuntimeError):
    pass


class UndefinedCorrelationError(MosaeError, ValueError):
    pass


class CheckpointError(MosaeError, ValueError):
    pass


# ---------- wire payload ----------
class PayloadError(MosaeError, ValueError):
    pass


class BadMagicError(PayloadError):
    pass


class UnsupportedVersionError(PayloadError):
    pass


class TruncatedPayloadError(PayloadError):
    pass


class IndexOutOfRangeError(PayloadError):
    pass
