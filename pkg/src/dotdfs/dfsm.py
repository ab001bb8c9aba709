"""DFSM: remote file streams with POSIX-like semantics.

Every request and reply is a method header ``[method][VarUInt len][payload]``.
Read and write requests carry their file offset explicitly, so the server
never depends on a remembered position; it keeps only the open descriptor
per stream id.  Replies echo the request method, except ``Read`` (answered
with method 0) and failures (method 10, payload ``[status][message]``).

Request payloads (every integer is a VarUInt)::

    Open        path:str  mode:u8  access:u8  share:u8   -> id, position
    Read        id  offset  want                          -> data
    Write       id  offset  data...                       -> position after write
    Seek        id  whence:u8  sign:u8  magnitude  pos    -> new position
    Flush       id                                        -> ()
    SetLength   id  length                                -> ()
    Lock/Unlock id                                        -> ()
    Close       id                                        -> ()
"""

from __future__ import annotations

import errno
import fcntl
import logging
import os
import threading
from dataclasses import dataclass, field
from enum import IntEnum

from . import wire
from .errors import (
    AlreadyExists,
    DotDfsError,
    HandleClosed,
    InvalidOffset,
    LockConflict,
    MalformedOp,
    NotFound,
    PeerReset,
    ShareViolation,
    error_from_status,
    status_of,
)
from .paths import FsRoot
from .wire import DfsmMethod, DfsmMethodHeader

log = logging.getLogger(__name__)

MAX_CHUNK = wire.MAX_PAYLOAD - 64


class FileMode(IntEnum):
    CREATE_NEW = 1
    CREATE = 2
    OPEN = 3
    OPEN_OR_CREATE = 4
    TRUNCATE = 5
    APPEND = 6


class FileAccess(IntEnum):
    READ = 1
    WRITE = 2
    READ_WRITE = 3


class FileShare(IntEnum):
    NONE = 0
    READ = 1
    WRITE = 2
    READ_WRITE = 3


class Whence(IntEnum):
    BEGIN = 0
    CURRENT = 1
    END = 2


def _varuints(*values: int) -> bytes:
    return b"".join(wire.encode_varuint(v) for v in values)


# -- server side ------------------------------------------------------------

@dataclass
class _OpenFile:
    fd: int
    path: str
    access: int
    share: int
    append: bool
    locked: bool = False


class ShareTable:
    """Server-wide registry of open DFSM handles, enforcing share modes."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_path: dict[str, dict[int, _OpenFile]] = {}
        self._next_id = 1
        self.open_count = 0

    def register(self, path: str, access: int, share: int, opener) -> tuple[int, _OpenFile]:
        with self._lock:
            for other in self._by_path.get(path, {}).values():
                if (access & ~other.share) or (other.access & ~share):
                    raise ShareViolation(f"{os.path.basename(path)} is open with an incompatible share mode")
            entry = opener()
            hid = self._next_id
            self._next_id += 1
            self._by_path.setdefault(path, {})[hid] = entry
            self.open_count += 1
            return hid, entry

    def release(self, hid: int, entry: _OpenFile) -> None:
        with self._lock:
            handles = self._by_path.get(entry.path, {})
            if handles.pop(hid, None) is not None:
                self.open_count -= 1
            if not handles:
                self._by_path.pop(entry.path, None)
        try:
            os.close(entry.fd)
        except OSError:
            pass


_MODE_FLAGS = {
    FileMode.CREATE_NEW: os.O_CREAT | os.O_EXCL,
    FileMode.CREATE: os.O_CREAT | os.O_TRUNC,
    FileMode.OPEN: 0,
    FileMode.OPEN_OR_CREATE: os.O_CREAT,
    FileMode.TRUNCATE: os.O_TRUNC,
    FileMode.APPEND: os.O_CREAT,
}

_ACCESS_FLAGS = {
    FileAccess.READ: os.O_RDONLY,
    FileAccess.WRITE: os.O_WRONLY,
    FileAccess.READ_WRITE: os.O_RDWR,
}


class DfsmHandler:
    """Per-connection DFSM request loop and stream table."""

    def __init__(self, root: FsRoot, principal, shares: ShareTable):
        self.root = root
        self.principal = principal
        self.shares = shares
        self.handles: dict[int, _OpenFile] = {}

    def serve(self, chan) -> None:
        try:
            while True:
                try:
                    chan.begin_message()
                    request = DfsmMethodHeader.read(chan)
                except PeerReset:
                    return
                chan.send(self.execute(request).encode())
        finally:
            self.close_all()

    def close_all(self) -> None:
        for hid, entry in list(self.handles.items()):
            self.shares.release(hid, entry)
        self.handles.clear()

    def execute(self, request: DfsmMethodHeader) -> DfsmMethodHeader:
        try:
            method = DfsmMethod(request.method)
            payload = self._dispatch(method, wire.ByteReader(request.payload))
            reply = DfsmMethod.READ_REPLY if method == DfsmMethod.READ else method
            return DfsmMethodHeader(reply, payload)
        except (DotDfsError, OSError, ValueError) as exc:
            if isinstance(exc, ValueError) and not isinstance(exc, DotDfsError):
                exc = MalformedOp(str(exc))
            if isinstance(exc, OSError) and exc.errno == errno.ENOENT:
                exc = NotFound(os.strerror(exc.errno))
            return DfsmMethodHeader(DfsmMethod.ERROR, bytes((status_of(exc),)) + str(exc).encode("utf-8"))

    def _handle(self, reader) -> tuple[int, _OpenFile]:
        hid = wire.read_varuint(reader)
        entry = self.handles.get(hid)
        if entry is None:
            raise HandleClosed(f"stream {hid} is not open")
        return hid, entry

    def _dispatch(self, method: DfsmMethod, r: wire.ByteReader) -> bytes:
        if method == DfsmMethod.OPEN:
            return self._open(r)
        hid, entry = self._handle(r)
        if method == DfsmMethod.READ:
            offset, want = wire.read_varuint(r), wire.read_varuint(r)
            if not entry.access & FileAccess.READ:
                raise MalformedOp("stream not opened for reading")
            return os.pread(entry.fd, min(want, MAX_CHUNK), offset)
        if method == DfsmMethod.WRITE:
            offset = wire.read_varuint(r)
            data = r.recv_exact(r.remaining)
            if not entry.access & FileAccess.WRITE:
                raise MalformedOp("stream not opened for writing")
            if entry.append:
                offset = os.fstat(entry.fd).st_size
            view = memoryview(data)
            pos = offset
            while view:
                n = os.pwrite(entry.fd, view, pos)
                pos += n
                view = view[n:]
            return wire.encode_varuint(pos)
        if method == DfsmMethod.SEEK:
            whence = r.recv_exact(1)[0]
            sign = r.recv_exact(1)[0]
            magnitude = wire.read_varuint(r)
            current = wire.read_varuint(r)
            delta = -magnitude if sign else magnitude
            if whence == Whence.BEGIN:
                base = 0
            elif whence == Whence.CURRENT:
                base = current
            elif whence == Whence.END:
                base = os.fstat(entry.fd).st_size
            else:
                raise MalformedOp(f"bad whence {whence}")
            if base + delta < 0:
                raise InvalidOffset(f"seek to {base + delta}")
            return wire.encode_varuint(base + delta)
        if method == DfsmMethod.FLUSH:
            os.fsync(entry.fd)
            return b""
        if method == DfsmMethod.SET_LENGTH:
            if not entry.access & FileAccess.WRITE:
                raise MalformedOp("stream not opened for writing")
            os.ftruncate(entry.fd, wire.read_varuint(r))
            return b""
        if method == DfsmMethod.LOCK:
            try:
                fcntl.flock(entry.fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise LockConflict("file is locked by another stream") from None
            entry.locked = True
            return b""
        if method == DfsmMethod.UNLOCK:
            fcntl.flock(entry.fd, fcntl.LOCK_UN)
            entry.locked = False
            return b""
        if method == DfsmMethod.CLOSE:
            del self.handles[hid]
            self.shares.release(hid, entry)
            return b""
        raise MalformedOp(f"method {method.name} is not a request")

    def _open(self, r: wire.ByteReader) -> bytes:
        path = self.root.resolve(wire.read_str(r))
        mode, access, share = r.recv_exact(3)
        try:
            mode, access, share = FileMode(mode), FileAccess(access), FileShare(share)
        except ValueError as exc:
            raise MalformedOp(str(exc)) from None
        if access & FileAccess.READ:
            self.principal.require("r", "open")
        if access & FileAccess.WRITE or mode in (FileMode.CREATE, FileMode.CREATE_NEW, FileMode.TRUNCATE):
            self.principal.require("w", "open")
        if mode == FileMode.APPEND and not access & FileAccess.WRITE:
            raise MalformedOp("append requires write access")
        if mode == FileMode.TRUNCATE and not access & FileAccess.WRITE:
            raise MalformedOp("truncate requires write access")
        if path.is_dir():
            raise AlreadyExists("a directory has that name")

        def opener() -> _OpenFile:
            try:
                fd = os.open(path, _MODE_FLAGS[mode] | _ACCESS_FLAGS[access], 0o644)
            except FileExistsError:
                raise AlreadyExists(f"{path.name} already exists") from None
            except FileNotFoundError:
                raise NotFound(f"{path.name} not found") from None
            return _OpenFile(fd, str(path), int(access), int(share), mode == FileMode.APPEND)

        hid, entry = self.shares.register(str(path), int(access), int(share), opener)
        self.handles[hid] = entry
        position = os.fstat(entry.fd).st_size if entry.append else 0
        return _varuints(hid, position)


# -- client side ------------------------------------------------------------

class DfsmClient:
    """Request/reply access to one DFSM channel; may hold several handles."""

    def __init__(self, chan):
        self.chan = chan
        self._lock = threading.Lock()

    @classmethod
    def connect(cls, endpoint, security, *, timeout: float = 30.0) -> "DfsmClient":
        from .connection import open_channel

        return cls(open_channel(endpoint, security, wire.Mode.DFSM, timeout=timeout))

    def call(self, method: DfsmMethod, payload: bytes = b"") -> bytes:
        with self._lock:
            self.chan.send(DfsmMethodHeader(method, payload).encode())
            reply = DfsmMethodHeader.read(self.chan)
        if reply.method == DfsmMethod.ERROR:
            status = reply.payload[0] if reply.payload else 0
            raise error_from_status(status, reply.payload[1:].decode("utf-8", "replace"))
        expected = DfsmMethod.READ_REPLY if method == DfsmMethod.READ else method
        if reply.method != expected:
            raise MalformedOp(f"reply method {reply.method} to request {method.name}")
        return reply.payload

    def open(self, path: str, mode: FileMode = FileMode.OPEN, access: FileAccess = FileAccess.READ,
             share: FileShare = FileShare.NONE) -> "RemoteStreamHandle":
        payload = wire.encode_str(path) + bytes((mode, access, share))
        reader = wire.ByteReader(self.call(DfsmMethod.OPEN, payload))
        hid = wire.read_varuint(reader)
        position = wire.read_varuint(reader)
        return RemoteStreamHandle(self, hid, position, access, share, mode == FileMode.APPEND)

    def close(self) -> None:
        self.chan.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class RemoteStreamHandle:
    """A remote file stream; mirrors the byte position on the client."""

    client: DfsmClient
    stream_id: int
    position: int = 0
    access: FileAccess = FileAccess.READ
    share: FileShare = FileShare.NONE
    append: bool = False
    closed: bool = field(default=False)

    def _check(self) -> None:
        if self.closed:
            raise HandleClosed("stream is closed")

    def read(self, want: int) -> bytes:
        """Read up to ``want`` bytes; returns ``b""`` only at end of file."""
        self._check()
        if want <= 0:
            return b""
        parts = []
        remaining = want
        while remaining:
            chunk = self.client.call(DfsmMethod.READ,
                                     _varuints(self.stream_id, self.position, min(remaining, MAX_CHUNK)))
            if not chunk:
                break
            parts.append(chunk)
            self.position += len(chunk)
            remaining -= len(chunk)
        return b"".join(parts)

    def write(self, data: bytes) -> int:
        self._check()
        view = memoryview(data)
        for start in range(0, len(view), MAX_CHUNK):
            piece = view[start:start + MAX_CHUNK]
            reply = self.client.call(DfsmMethod.WRITE, _varuints(self.stream_id, self.position) + bytes(piece))
            self.position = wire.decode_varuint(reply)[0]
        return len(view)

    def seek(self, offset: int, whence: Whence = Whence.BEGIN) -> int:
        self._check()
        payload = (_varuints(self.stream_id) + bytes((whence, 1 if offset < 0 else 0))
                   + _varuints(abs(offset), self.position))
        self.position = wire.decode_varuint(self.client.call(DfsmMethod.SEEK, payload))[0]
        return self.position

    def tell(self) -> int:
        return self.position

    def flush(self) -> None:
        self._check()
        self.client.call(DfsmMethod.FLUSH, _varuints(self.stream_id))

    def set_length(self, length: int) -> None:
        self._check()
        self.client.call(DfsmMethod.SET_LENGTH, _varuints(self.stream_id, length))

    def lock(self) -> None:
        self._check()
        self.client.call(DfsmMethod.LOCK, _varuints(self.stream_id))

    def unlock(self) -> None:
        self._check()
        self.client.call(DfsmMethod.UNLOCK, _varuints(self.stream_id))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self.client.call(DfsmMethod.CLOSE, _varuints(self.stream_id))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class DotDfsFileStream(RemoteStreamHandle):
    """One-stream convenience wrapper that owns its own connection."""

    def __init__(self, path: str, mode: FileMode, access: FileAccess, share: FileShare,
                 endpoint, security, timeout: float = 30.0):
        client = DfsmClient.connect(endpoint, security, timeout=timeout)
        try:
            handle = client.open(path, mode, access, share)
        except BaseException:
            client.close()
            raise
        super().__init__(client, handle.stream_id, handle.position, access, share, handle.append)

    def close(self) -> None:
        try:
            super().close()
        finally:
            self.client.close()
