"""Byte-exact codecs for every binary header of the protocol.

All multi-byte integers are big-endian.  Variable-width integers use a
one-byte *mode* (the byte count) followed by exactly that many payload
bytes, and the mode is always minimal::

    value        encoding
    0            00
    255          01 ff
    300          02 01 2c
    65536        03 01 00 00

Transfer frames (bulk data on every parallel stream)::

    +----+----+-----------+-----------+-----------------+
    | L1 | L2 | SeekValue | ReadValue | payload         |
    | 1  | 1  | L1 bytes  | L2 bytes  | ReadValue bytes |
    +----+----+-----------+-----------+-----------------+

``L1 = L2 = 0`` is the end-of-transfer sentinel and carries nothing else.
A data frame always has ``ReadValue >= 1`` so the sentinel can never be
confused with an empty write.

Byte sources passed to the ``read_*`` helpers only need a
``recv_exact(n) -> bytes`` method; :class:`ByteReader` provides one over an
in-memory buffer and the transport channels provide one over sockets.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass
from enum import IntEnum
from typing import Protocol, Union

from .errors import (
    MalformedFrame,
    ModeTooLarge,
    NonMinimalEncoding,
    PayloadMismatch,
    TruncatedInput,
    error_from_status,
)

DEFAULT_PORT = 2799
MAX_VARUINT_MODE = 8
MAX_VARUINT = (1 << 64) - 1
MAX_PAYLOAD = 8 * 1024 * 1024
DEFAULT_BLOCK = 256 * 1024
GUID_LEN = 16


class ByteSource(Protocol):
    def recv_exact(self, n: int) -> bytes: ...


class ServiceByte(IntEnum):
    DOTDFS = 0
    REMOTE_PROCESS = 1
    THREAD = 2


class Mode(IntEnum):
    """Servicing mode requested after authentication."""

    DFSM = 1
    FTSM = 2
    PATHM = 3


class Protection(IntEnum):
    SEMI_SECURE = 0  # switch to plaintext once the mode's setup exchange is done
    ENCRYPTED = 1


class Direction(IntEnum):
    UPLOAD = 0
    DOWNLOAD = 1
    # memory-to-memory benchmarking: server discards / synthesizes zeros
    UPLOAD_NULL = 2
    DOWNLOAD_ZERO = 3

    @property
    def is_upload(self) -> bool:
        return self in (Direction.UPLOAD, Direction.UPLOAD_NULL)

    @property
    def is_memory(self) -> bool:
        return self in (Direction.UPLOAD_NULL, Direction.DOWNLOAD_ZERO)


class DfsmMethod(IntEnum):
    READ_REPLY = 0
    READ = 1
    WRITE = 2
    SEEK = 3
    FLUSH = 4
    SET_LENGTH = 5
    LOCK = 6
    UNLOCK = 7
    OPEN = 8
    CLOSE = 9
    ERROR = 10


ERROR_OPCODE = 10


# -- VarUInt ----------------------------------------------------------------

def varuint_mode(value: int) -> int:
    return (value.bit_length() + 7) // 8


def encode_varuint(value: int) -> bytes:
    if value < 0 or value > MAX_VARUINT:
        raise ValueError(f"varuint out of range: {value}")
    mode = varuint_mode(value)
    return bytes((mode,)) + value.to_bytes(mode, "big")


def _check_minimal(payload: bytes) -> None:
    if payload and payload[0] == 0:
        raise NonMinimalEncoding(f"leading zero byte in {len(payload)}-byte integer")


def decode_varuint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Decode one VarUInt at ``offset``; returns ``(value, bytes_consumed)``."""
    if offset >= len(data):
        raise TruncatedInput("empty varuint")
    mode = data[offset]
    if mode > MAX_VARUINT_MODE:
        raise ModeTooLarge(f"varuint mode {mode} > {MAX_VARUINT_MODE}")
    end = offset + 1 + mode
    if end > len(data):
        raise TruncatedInput(f"varuint needs {mode} bytes")
    payload = bytes(data[offset + 1:end])
    _check_minimal(payload)
    return int.from_bytes(payload, "big"), 1 + mode


def read_varuint(src: ByteSource) -> int:
    mode = src.recv_exact(1)[0]
    if mode > MAX_VARUINT_MODE:
        raise ModeTooLarge(f"varuint mode {mode} > {MAX_VARUINT_MODE}")
    if mode == 0:
        return 0
    payload = src.recv_exact(mode)
    _check_minimal(payload)
    return int.from_bytes(payload, "big")


def encode_bytes(data: bytes) -> bytes:
    return encode_varuint(len(data)) + bytes(data)


def encode_str(text: str) -> bytes:
    return encode_bytes(text.encode("utf-8"))


def read_bytes(src: ByteSource, limit: int = MAX_PAYLOAD) -> bytes:
    n = read_varuint(src)
    if n > limit:
        raise MalformedFrame(f"field of {n} bytes exceeds limit {limit}")
    return src.recv_exact(n) if n else b""


def read_str(src: ByteSource, limit: int = 64 * 1024) -> str:
    raw = read_bytes(src, limit)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedFrame(f"invalid utf-8 string: {exc}") from None


class ByteReader:
    """``recv_exact`` over an in-memory buffer."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = memoryview(data)
        self.pos = offset

    def recv_exact(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise TruncatedInput(f"wanted {n} bytes, {len(self.data) - self.pos} left")
        out = bytes(self.data[self.pos:end])
        self.pos = end
        return out

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def expect_end(self) -> None:
        if self.remaining:
            raise MalformedFrame(f"{self.remaining} trailing bytes")


# -- transfer frames --------------------------------------------------------

@dataclass(frozen=True)
class TransferFrame:
    seek_value: int
    payload: bytes

    @property
    def read_value(self) -> int:
        return len(self.payload)

    def __eq__(self, other):
        if not isinstance(other, TransferFrame):
            return NotImplemented
        return self.seek_value == other.seek_value and bytes(self.payload) == bytes(other.payload)

    def __hash__(self):
        return hash((self.seek_value, bytes(self.payload)))


class _EndOfTransfer:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "EndOfTransfer"

    def __bool__(self):
        return False


EndOfTransfer = _EndOfTransfer()
SENTINEL = b"\x00\x00"

Frame = Union[TransferFrame, _EndOfTransfer]


def encode_frame_header(seek_value: int, read_value: int) -> bytes:
    if read_value < 1:
        raise PayloadMismatch("data frame must carry at least one byte")
    if read_value > MAX_PAYLOAD:
        raise PayloadMismatch(f"payload {read_value} exceeds {MAX_PAYLOAD}")
    if seek_value < 0 or seek_value > MAX_VARUINT:
        raise ValueError(f"seek value out of range: {seek_value}")
    l1 = varuint_mode(seek_value)
    l2 = varuint_mode(read_value)
    return (bytes((l1, l2)) + seek_value.to_bytes(l1, "big")
            + read_value.to_bytes(l2, "big"))


def encode_frame(frame: Frame, read_value: int | None = None) -> bytes:
    """Encode a data frame or the sentinel.

    ``read_value`` may be given to assert the payload length; a mismatch
    raises :class:`PayloadMismatch`.
    """
    if frame is EndOfTransfer:
        return SENTINEL
    if read_value is not None and read_value != len(frame.payload):
        raise PayloadMismatch(f"read_value {read_value} != payload length {len(frame.payload)}")
    return encode_frame_header(frame.seek_value, len(frame.payload)) + bytes(frame.payload)


def _parse_frame_header(head: bytes) -> tuple[int, int]:
    l1, l2 = head[0], head[1]
    if l1 > MAX_VARUINT_MODE or l2 > MAX_VARUINT_MODE:
        raise ModeTooLarge(f"frame length modes {l1}/{l2}")
    if l2 == 0 and l1 != 0:
        raise MalformedFrame("data frame with zero ReadValue")
    return l1, l2


def _finish_header(l1: int, l2: int, fields: bytes) -> tuple[int, int]:
    seek_raw, read_raw = fields[:l1], fields[l1:]
    _check_minimal(seek_raw)
    _check_minimal(read_raw)
    seek = int.from_bytes(seek_raw, "big")
    length = int.from_bytes(read_raw, "big")
    if length > MAX_PAYLOAD:
        raise MalformedFrame(f"frame payload {length} exceeds {MAX_PAYLOAD}")
    return seek, length


def decode_frame(data: bytes, offset: int = 0) -> tuple[Frame, int]:
    """Decode exactly one frame starting at ``offset``.

    Returns ``(frame, next_offset)`` where ``frame`` is a
    :class:`TransferFrame` or :data:`EndOfTransfer`.
    """
    reader = ByteReader(data, offset)
    frame = read_frame(reader)
    return frame, reader.pos


def read_frame_header(src: ByteSource) -> tuple[int, int] | None:
    """Read a frame header; ``None`` means the sentinel."""
    l1, l2 = _parse_frame_header(src.recv_exact(2))
    if l1 == 0 and l2 == 0:
        return None
    return _finish_header(l1, l2, src.recv_exact(l1 + l2))


def read_frame(src: ByteSource) -> Frame:
    header = read_frame_header(src)
    if header is None:
        return EndOfTransfer
    seek, length = header
    return TransferFrame(seek, src.recv_exact(length))


def iter_frames(data: bytes):
    """Split a concatenation of encoded frames."""
    pos = 0
    while pos < len(data):
        frame, pos = decode_frame(data, pos)
        yield frame


# -- session parameters -----------------------------------------------------

def new_guid() -> bytes:
    return uuid.uuid4().bytes


@dataclass(frozen=True)
class SessionParams:
    """FTSM session negotiation header; identical on all ``n`` streams.

    ``length == 0`` means "to end of file".  For uploads, ``offset == 0``
    and ``length == 0`` together request a whole-file replacement; any other
    combination writes a fragment in place.
    """

    guid: bytes
    n: int
    window: int
    direction: Direction
    path: str
    offset: int = 0
    length: int = 0
    block: int = 0  # 0 = sender's default

    def validate(self) -> None:
        if len(self.guid) != GUID_LEN:
            raise MalformedFrame(f"guid must be {GUID_LEN} bytes")
        if self.n < 1:
            raise MalformedFrame("stream count must be >= 1")
        if not self.path:
            raise MalformedFrame("empty path")
        if self.block > MAX_PAYLOAD:
            raise MalformedFrame(f"block size {self.block} exceeds {MAX_PAYLOAD}")

    @property
    def is_fragment(self) -> bool:
        return self.offset != 0 or self.length != 0

    def encode(self) -> bytes:
        self.validate()
        return b"".join((
            bytes(self.guid),
            encode_varuint(self.n),
            encode_varuint(self.window),
            bytes((int(self.direction),)),
            encode_str(self.path),
            encode_varuint(self.offset),
            encode_varuint(self.length),
            encode_varuint(self.block),
        ))

    @classmethod
    def read(cls, src: ByteSource) -> "SessionParams":
        guid = src.recv_exact(GUID_LEN)
        n = read_varuint(src)
        window = read_varuint(src)
        raw_dir = src.recv_exact(1)[0]
        try:
            direction = Direction(raw_dir)
        except ValueError:
            raise MalformedFrame(f"unknown direction {raw_dir}") from None
        path = read_str(src)
        offset = read_varuint(src)
        length = read_varuint(src)
        block = read_varuint(src)
        params = cls(guid, n, window, direction, path, offset, length, block)
        params.validate()
        return params

    @classmethod
    def decode(cls, data: bytes) -> "SessionParams":
        reader = ByteReader(data)
        params = cls.read(reader)
        reader.expect_end()
        return params


# -- DFSM method header -----------------------------------------------------

@dataclass(frozen=True)
class DfsmMethodHeader:
    method: int
    payload: bytes = b""

    def encode(self) -> bytes:
        return bytes((self.method,)) + encode_bytes(self.payload)

    @classmethod
    def read(cls, src: ByteSource) -> "DfsmMethodHeader":
        method = src.recv_exact(1)[0]
        if method > DfsmMethod.ERROR:
            raise MalformedFrame(f"unknown DFSM method {method}")
        return cls(method, read_bytes(src, MAX_PAYLOAD + 64))


# -- status replies ---------------------------------------------------------

def encode_status(status: int, message: str = "") -> bytes:
    return bytes((status,)) + encode_str(message)


def read_status(src: ByteSource) -> tuple[int, str]:
    status = src.recv_exact(1)[0]
    return status, read_str(src)


def encode_error_frame(message: str) -> bytes:
    return bytes((ERROR_OPCODE,)) + encode_str(message)


def encode_params_ack(granted_window: int, span: int) -> bytes:
    return b"\x00" + encode_varuint(granted_window) + encode_varuint(span)


def read_params_ack(src: ByteSource) -> tuple[int, int]:
    """Read the server's answer to a SessionParams header.

    Returns ``(granted_window, span)``; a rejection raises the matching
    :mod:`dotdfs.errors` exception.
    """
    status = src.recv_exact(1)[0]
    if status:
        raise error_from_status(status, read_str(src))
    return read_varuint(src), read_varuint(src)
