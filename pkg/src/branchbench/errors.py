"""Backend error taxonomy shared by drivers, adapters and the interpreter."""

from __future__ import annotations


class BackendError(Exception):
    error_class = "Internal"
    retryable = False

    def __init__(self, message: str = "", *, retryable: bool | None = None):
        super().__init__(message)
        self.message = message
        if retryable is not None:
            self.retryable = retryable

    def __reduce__(self):
        return (self.__class__, (self.message,))


class RateLimited(BackendError):
    error_class = "RateLimited"
    retryable = True


class BranchLimitExceeded(BackendError):
    # Retryable: a concurrent prune may free a live-branch slot.
    error_class = "BranchLimitExceeded"
    retryable = True


class Timeout(BackendError):
    error_class = "Timeout"
    retryable = True


class NotFound(BackendError):
    error_class = "NotFound"


class UnsupportedOperation(BackendError):
    error_class = "UnsupportedOperation"


class Conflict(BackendError):
    error_class = "Conflict"


class InternalError(BackendError):
    error_class = "Internal"


ERROR_CLASSES = {
    cls.error_class: cls
    for cls in (RateLimited, BranchLimitExceeded, Timeout, NotFound, UnsupportedOperation, Conflict, InternalError)
}


def error_from_class(name: str, message: str = "") -> BackendError:
    return ERROR_CLASSES.get(name, InternalError)(message)


class SessionClosed(NotFound):
    """Raised when a closed session is used."""


class SchedulingError(RuntimeError):
    """No frontier or no eligible parent is available right now."""
