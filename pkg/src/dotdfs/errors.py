"""Exception hierarchy shared by every layer of the protocol stack.

Errors that cross the wire carry a one-byte status code (see
:class:`Status`).  The receiving side turns a code back into the matching
exception class with :func:`error_from_status`, so a ``NotFound`` raised by
the server surfaces as ``NotFound`` in the client library.
"""

from __future__ import annotations

from enum import IntEnum


class Status(IntEnum):
    OK = 0
    NOT_FOUND = 1
    ALREADY_EXISTS = 2
    PATH_OUTSIDE_ROOT = 3
    ACCESS_DENIED = 4
    MALFORMED = 5
    TOO_LARGE = 6
    IO_ERROR = 7
    AUTH_FAILED = 8
    PARAM_MISMATCH = 9
    POOL_FULL = 10
    DUPLICATE_STREAM = 11
    UNSUPPORTED = 12
    SHARE_VIOLATION = 13
    HANDLE_CLOSED = 14
    INVALID_OFFSET = 15
    NOT_EMPTY = 16
    TIMEOUT = 17
    LOCK_CONFLICT = 18
    DISK_FULL = 19
    TRANSFER_FAILED = 20


class DotDfsError(Exception):
    status = Status.IO_ERROR


# -- codec errors -----------------------------------------------------------

class WireError(DotDfsError):
    status = Status.MALFORMED


class TruncatedInput(WireError):
    """The byte source ended before a complete field could be read."""


class NonMinimalEncoding(WireError):
    pass


class ModeTooLarge(WireError):
    pass


class MalformedFrame(WireError):
    pass


class PayloadMismatch(WireError):
    pass


# -- security ---------------------------------------------------------------

class SecurityError(DotDfsError):
    status = Status.AUTH_FAILED


class UnsupportedSuite(SecurityError):
    status = Status.UNSUPPORTED


class VerificationFailed(SecurityError):
    pass


class DecryptFailed(SecurityError):
    pass


class IntegrityFailure(SecurityError):
    status = Status.MALFORMED


class AuthFailed(SecurityError):
    pass


class AccessDenied(SecurityError):
    status = Status.ACCESS_DENIED


# -- session / transport ----------------------------------------------------

class HandshakeTimeout(DotDfsError):
    status = Status.TIMEOUT


class UnsupportedService(DotDfsError):
    status = Status.UNSUPPORTED


class ParamMismatch(DotDfsError):
    status = Status.PARAM_MISMATCH


class ParamRejected(DotDfsError):
    status = Status.PARAM_MISMATCH


class PoolFull(DotDfsError):
    status = Status.POOL_FULL


class DuplicateStream(DotDfsError):
    status = Status.DUPLICATE_STREAM


class PeerReset(DotDfsError):
    pass


class ConnectFailed(DotDfsError):
    pass


class TransferAborted(DotDfsError):
    status = Status.TRANSFER_FAILED


class OverlapConflict(DotDfsError):
    status = Status.MALFORMED


class BindFailed(DotDfsError):
    pass


class ConfigError(DotDfsError):
    pass


# -- filesystem -------------------------------------------------------------

class FsError(DotDfsError):
    pass


class NotFound(FsError):
    status = Status.NOT_FOUND


FileNotFound = NotFound


class AlreadyExists(FsError):
    status = Status.ALREADY_EXISTS


class PathOutsideRoot(FsError):
    status = Status.PATH_OUTSIDE_ROOT


class PermissionDenied(FsError):
    status = Status.ACCESS_DENIED


class MalformedOp(FsError):
    status = Status.MALFORMED


class TooLarge(FsError):
    status = Status.TOO_LARGE


class DiskFull(FsError):
    status = Status.DISK_FULL


class DirectoryNotEmpty(FsError):
    status = Status.NOT_EMPTY


class ShareViolation(FsError):
    status = Status.SHARE_VIOLATION


class HandleClosed(FsError):
    status = Status.HANDLE_CLOSED


class InvalidOffset(FsError):
    status = Status.INVALID_OFFSET


class LockConflict(FsError):
    status = Status.LOCK_CONFLICT


class IoError(FsError):
    status = Status.IO_ERROR


class CycleDetected(FsError):
    pass


class PartialFailure(DotDfsError):
    """Some files of a tree transfer failed; ``report`` lists them."""

    status = Status.TRANSFER_FAILED

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


_BY_STATUS: dict[Status, type[DotDfsError]] = {
    Status.NOT_FOUND: NotFound,
    Status.ALREADY_EXISTS: AlreadyExists,
    Status.PATH_OUTSIDE_ROOT: PathOutsideRoot,
    Status.ACCESS_DENIED: AccessDenied,
    Status.MALFORMED: MalformedOp,
    Status.TOO_LARGE: TooLarge,
    Status.IO_ERROR: IoError,
    Status.AUTH_FAILED: AuthFailed,
    Status.PARAM_MISMATCH: ParamRejected,
    Status.POOL_FULL: PoolFull,
    Status.DUPLICATE_STREAM: DuplicateStream,
    Status.UNSUPPORTED: UnsupportedService,
    Status.SHARE_VIOLATION: ShareViolation,
    Status.HANDLE_CLOSED: HandleClosed,
    Status.INVALID_OFFSET: InvalidOffset,
    Status.NOT_EMPTY: DirectoryNotEmpty,
    Status.TIMEOUT: HandshakeTimeout,
    Status.LOCK_CONFLICT: LockConflict,
    Status.DISK_FULL: DiskFull,
    Status.TRANSFER_FAILED: TransferAborted,
}


def error_from_status(code: int, message: str = "") -> DotDfsError:
    try:
        cls = _BY_STATUS[Status(code)]
    except (ValueError, KeyError):
        cls = DotDfsError
    return cls(message or f"remote error {code}")


def status_of(exc: BaseException) -> Status:
    if isinstance(exc, DotDfsError):
        return exc.status
    if isinstance(exc, FileNotFoundError):
        return Status.NOT_FOUND
    if isinstance(exc, FileExistsError):
        return Status.ALREADY_EXISTS
    if isinstance(exc, PermissionError):
        return Status.ACCESS_DENIED
    return Status.IO_ERROR
