"""PathM: RPC-style remote path operations over one reusable channel.

Request::  [opcode][arg]*      each arg = [VarUInt len][bytes]
Reply::    [status][VarUInt len][payload]

Replies come back strictly in request order.  A non-zero status carries a
UTF-8 message as its payload; the channel stays usable afterwards.
"""

from __future__ import annotations

import hashlib
import logging
import os
import tempfile
import threading
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable

from . import wire
from .errors import (
    AlreadyExists,
    DirectoryNotEmpty,
    DiskFull,
    DotDfsError,
    MalformedOp,
    NotFound,
    PeerReset,
    Status,
    TooLarge,
    error_from_status,
    status_of,
)
from .paths import FsRoot

log = logging.getLogger(__name__)

SMALL_FILE_THRESHOLD = 1024 * 1024


class Op(IntEnum):
    CLOSE_SESSION = 0
    CREATE_DIRECTORY = 1
    DELETE_DIRECTORY = 2
    DELETE_FILE = 3
    EXISTS = 4
    GET_SIZE = 5
    LIST_DIRECTORY = 6
    RENAME = 7
    UPLOAD_SMALL_FILE = 8
    DOWNLOAD_SMALL_FILE = 9
    CHECKSUM = 10


ARG_COUNT = {
    Op.CLOSE_SESSION: 0,
    Op.CREATE_DIRECTORY: 1,
    Op.DELETE_DIRECTORY: 1,
    Op.DELETE_FILE: 1,
    Op.EXISTS: 1,
    Op.GET_SIZE: 1,
    Op.LIST_DIRECTORY: 1,
    Op.RENAME: 2,
    Op.UPLOAD_SMALL_FILE: 2,
    Op.DOWNLOAD_SMALL_FILE: 1,
    Op.CHECKSUM: 1,
}

WRITE_OPS = {Op.CREATE_DIRECTORY, Op.DELETE_DIRECTORY, Op.DELETE_FILE, Op.RENAME, Op.UPLOAD_SMALL_FILE}


class Kind(IntEnum):
    MISSING = 0
    FILE = 1
    DIRECTORY = 2


@dataclass(frozen=True)
class PathOp:
    opcode: int
    args: tuple[bytes, ...] = ()

    @classmethod
    def make(cls, opcode: Op, *args) -> "PathOp":
        return cls(opcode, tuple(a.encode("utf-8") if isinstance(a, str) else bytes(a) for a in args))

    def encode(self) -> bytes:
        return bytes((self.opcode,)) + b"".join(wire.encode_bytes(a) for a in self.args)


@dataclass(frozen=True)
class PathReply:
    status: int
    payload: bytes = b""

    @property
    def ok(self) -> bool:
        return self.status == Status.OK

    @property
    def message(self) -> str:
        return "" if self.ok else self.payload.decode("utf-8", "replace")

    def raise_for_status(self) -> "PathReply":
        if not self.ok:
            raise error_from_status(self.status, self.message)
        return self

    def encode(self) -> bytes:
        return bytes((self.status,)) + wire.encode_bytes(self.payload)

    @classmethod
    def read(cls, src: wire.ByteSource) -> "PathReply":
        status = src.recv_exact(1)[0]
        return cls(status, wire.read_bytes(src, wire.MAX_PAYLOAD + 64))

    @classmethod
    def error(cls, exc: BaseException) -> "PathReply":
        return cls(status_of(exc), str(exc).encode("utf-8"))


@dataclass(frozen=True)
class DirEntry:
    name: str
    kind: Kind
    size: int


def encode_listing(entries: Iterable[DirEntry]) -> bytes:
    entries = list(entries)
    out = [wire.encode_varuint(len(entries))]
    for e in entries:
        out += [wire.encode_str(e.name), bytes((e.kind,)), wire.encode_varuint(e.size)]
    return b"".join(out)


def decode_listing(data: bytes) -> list[DirEntry]:
    reader = wire.ByteReader(data)
    count = wire.read_varuint(reader)
    entries = []
    for _ in range(count):
        name = wire.read_str(reader)
        kind = Kind(reader.recv_exact(1)[0])
        entries.append(DirEntry(name, kind, wire.read_varuint(reader)))
    reader.expect_end()
    return entries


def file_sha256(path: str | os.PathLike, chunk: int = 1024 * 1024) -> bytes:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            data = fh.read(chunk)
            if not data:
                break
            h.update(data)
    return h.digest()


def _kind_of(path: Path) -> Kind:
    if path.is_dir():
        return Kind.DIRECTORY
    if path.exists():
        return Kind.FILE
    return Kind.MISSING


def atomic_write(target: Path, content: bytes, fsync: bool = False) -> None:
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(content)
            if fsync:
                fh.flush()
                os.fsync(fh.fileno())
        os.replace(tmp, target)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# -- server side ------------------------------------------------------------

class PathmHandler:
    """Executes PathM requests for one authenticated connection."""

    def __init__(self, root: FsRoot, principal, threshold: int = SMALL_FILE_THRESHOLD,
                 fsync: bool = False):
        self.root = root
        self.principal = principal
        self.threshold = threshold
        self.fsync = fsync
        self.ops_executed = 0

    def serve(self, chan) -> None:
        while True:
            try:
                chan.begin_message()
                opcode = chan.recv_exact(1)[0]
            except PeerReset:
                return
            if opcode not in ARG_COUNT:
                chan.send(PathReply(Status.MALFORMED, f"unknown opcode {opcode}".encode()).encode())
                return
            op = Op(opcode)
            too_large = False
            args = []
            for idx in range(ARG_COUNT[op]):
                n = wire.read_varuint(chan)
                if n > wire.MAX_PAYLOAD:
                    chan.send(PathReply(Status.TOO_LARGE, b"argument exceeds wire cap").encode())
                    return
                if op == Op.UPLOAD_SMALL_FILE and idx == 1 and n > self.threshold:
                    too_large = True
                args.append(chan.recv_exact(n))
            if too_large:
                reply = PathReply(Status.TOO_LARGE, f"exceeds small-file threshold {self.threshold}".encode())
            else:
                reply = self.execute(PathOp(op, tuple(args)))
            chan.send(reply.encode())
            if op == Op.CLOSE_SESSION:
                return

    def execute(self, op: PathOp) -> PathReply:
        self.ops_executed += 1
        try:
            return PathReply(Status.OK, self._dispatch(Op(op.opcode), op.args))
        except DotDfsError as exc:
            return PathReply.error(exc)
        except OSError as exc:
            if getattr(exc, "errno", None) == 28:
                return PathReply.error(DiskFull(str(exc)))
            return PathReply.error(exc)

    def _path(self, raw: bytes) -> Path:
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedOp("path is not valid utf-8") from None
        return self.root.resolve(text)

    def _dispatch(self, op: Op, args: tuple[bytes, ...]) -> bytes:
        if op in WRITE_OPS:
            self.principal.require("w", op.name)
        elif op != Op.CLOSE_SESSION:
            self.principal.require("r", op.name)

        if op == Op.CLOSE_SESSION:
            return b""
        path = self._path(args[0])
        if op == Op.CREATE_DIRECTORY:
            if path.exists() and not path.is_dir():
                raise AlreadyExists(f"{path.name} exists and is not a directory")
            path.mkdir(parents=True, exist_ok=True)
            return b""
        if op == Op.DELETE_DIRECTORY:
            if not path.is_dir():
                raise NotFound("no such directory")
            if path == self.root.root:
                raise MalformedOp("cannot delete the root")
            try:
                path.rmdir()
            except OSError as exc:
                if exc.errno in (39, 66):
                    raise DirectoryNotEmpty("directory not empty") from None
                raise
            return b""
        if op == Op.DELETE_FILE:
            if not path.is_file():
                raise NotFound("no such file")
            path.unlink()
            return b""
        if op == Op.EXISTS:
            return bytes((_kind_of(path),))
        if op == Op.GET_SIZE:
            if not path.is_file():
                raise NotFound("no such file")
            return wire.encode_varuint(path.stat().st_size)
        if op == Op.LIST_DIRECTORY:
            if not path.is_dir():
                raise NotFound("no such directory")
            entries = []
            for child in sorted(os.scandir(path), key=lambda e: e.name):
                if child.is_dir(follow_symlinks=False):
                    entries.append(DirEntry(child.name, Kind.DIRECTORY, 0))
                elif child.is_file(follow_symlinks=False):
                    entries.append(DirEntry(child.name, Kind.FILE, child.stat().st_size))
            return encode_listing(entries)
        if op == Op.RENAME:
            target = self._path(args[1])
            if not path.exists():
                raise NotFound("rename source missing")
            if target.exists():
                raise AlreadyExists("rename target exists")
            os.rename(path, target)
            return b""
        if op == Op.UPLOAD_SMALL_FILE:
            if path.is_dir():
                raise AlreadyExists("a directory has that name")
            if not path.parent.is_dir():
                raise NotFound("parent directory missing")
            atomic_write(path, args[1], self.fsync)
            return b""
        if op == Op.DOWNLOAD_SMALL_FILE:
            if not path.is_file():
                raise NotFound("no such file")
            size = path.stat().st_size
            if size > self.threshold:
                raise TooLarge(f"{size} bytes exceeds small-file threshold {self.threshold}")
            return path.read_bytes()
        if op == Op.CHECKSUM:
            if not path.is_file():
                raise NotFound("no such file")
            return file_sha256(path)
        raise MalformedOp(f"unhandled opcode {op}")


# -- client side ------------------------------------------------------------

class PathClient:
    """Serial request/reply client bound to one PathM channel."""

    def __init__(self, chan, threshold: int = SMALL_FILE_THRESHOLD):
        self.chan = chan
        self.threshold = threshold
        self._lock = threading.Lock()

    @classmethod
    def connect(cls, endpoint, security, *, timeout: float = 30.0,
                threshold: int = SMALL_FILE_THRESHOLD) -> "PathClient":
        from .connection import open_channel

        return cls(open_channel(endpoint, security, wire.Mode.PATHM, timeout=timeout), threshold)

    def execute(self, op: PathOp) -> PathReply:
        with self._lock:
            self.chan.send(op.encode())
            return PathReply.read(self.chan)

    def pipeline(self, ops: list[PathOp]) -> list[PathReply]:
        """Send all requests without waiting, then collect replies in order."""
        errors = []

        def writer():
            try:
                for op in ops:
                    self.chan.send(op.encode())
            except BaseException as exc:
                errors.append(exc)

        with self._lock:
            t = threading.Thread(target=writer, name="pathm-pipeline", daemon=True)
            t.start()
            replies = [PathReply.read(self.chan) for _ in ops]
            t.join()
        if errors:
            raise errors[0]
        return replies

    def _call(self, opcode: Op, *args) -> bytes:
        return self.execute(PathOp.make(opcode, *args)).raise_for_status().payload

    def mkdir(self, path: str) -> None:
        self._call(Op.CREATE_DIRECTORY, path)

    def rmdir(self, path: str) -> None:
        self._call(Op.DELETE_DIRECTORY, path)

    def delete_file(self, path: str) -> None:
        self._call(Op.DELETE_FILE, path)

    def kind(self, path: str) -> Kind:
        return Kind(self._call(Op.EXISTS, path)[0])

    def exists(self, path: str) -> bool:
        return self.kind(path) != Kind.MISSING

    def size(self, path: str) -> int:
        return wire.decode_varuint(self._call(Op.GET_SIZE, path))[0]

    def listdir(self, path: str) -> list[DirEntry]:
        return decode_listing(self._call(Op.LIST_DIRECTORY, path))

    def rename(self, src: str, dst: str) -> None:
        self._call(Op.RENAME, src, dst)

    def checksum(self, path: str) -> bytes:
        return self._call(Op.CHECKSUM, path)

    def put_bytes(self, remote_path: str, content: bytes) -> PathReply:
        if len(content) > self.threshold:
            raise TooLarge(f"{len(content)} bytes exceeds small-file threshold {self.threshold}")
        return self.execute(PathOp.make(Op.UPLOAD_SMALL_FILE, remote_path, content)).raise_for_status()

    def upload_small_file(self, local_path: str | os.PathLike, remote_path: str) -> PathReply:
        size = os.path.getsize(local_path)
        if size > self.threshold:
            raise TooLarge(f"{size} bytes exceeds small-file threshold {self.threshold}")
        with open(local_path, "rb") as fh:
            return self.put_bytes(remote_path, fh.read())

    def get_bytes(self, remote_path: str) -> bytes:
        return self._call(Op.DOWNLOAD_SMALL_FILE, remote_path)

    def download_small_file(self, remote_path: str, local_path: str | os.PathLike) -> int:
        content = self.get_bytes(remote_path)
        local = Path(local_path)
        atomic_write(local, content)
        return len(content)

    def close(self) -> None:
        try:
            self.execute(PathOp(Op.CLOSE_SESSION))
        except (DotDfsError, OSError):
            pass
        finally:
            self.chan.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


__all__ = [
    "Op", "Kind", "PathOp", "PathReply", "DirEntry", "PathmHandler", "PathClient",
    "SMALL_FILE_THRESHOLD", "file_sha256",
]
