"""Exception hierarchy shared by every module.

The CLI maps each class to a process exit code, so library code raises the
most specific one that applies.
"""

from __future__ import annotations


class LidarUDAError(Exception):
    exit_code = 2


class ValidationError(LidarUDAError, ValueError):
    """Input violates a documented precondition or type invariant."""

    exit_code = 1


class ConfigError(ValidationError):
    exit_code = 1


class FormatError(LidarUDAError, ValueError):
    """On-disk data does not follow the documented binary layout."""

    exit_code = 3

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class NumericError(LidarUDAError, ArithmeticError):
    exit_code = 2


class DataIOError(LidarUDAError, OSError):
    """Reading or writing a file failed; carries the offending path."""

    exit_code = 3

    def __init__(self, path, reason: str):
        self.path = path
        super().__init__(f"{path}: {reason}")
