"""FTSM client: parallel-stream upload and download.

A session opens ``n`` authenticated connections that share one GUID and
one :class:`SessionParams` header.  Uploads feed a single shared read
queue (:class:`~dotdfs.blockio.Lfrq`) to whichever stream is writable;
downloads run the same readiness loop plus coalescing writer the server
uses.  A finished session can be reused for another transfer on the same
streams.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import wire
from .blockio import (
    CoalescingWriter,
    FrameBuffer,
    FrameHook,
    Lfrq,
    NullSink,
    SelectorFactory,
    default_selector,
    receive_frames,
    send_frames,
)
from .connection import Endpoint, Security, open_channel
from .errors import DotDfsError, IntegrityFailure, TransferAborted, error_from_status
from .pathm import PathClient, file_sha256
from .wire import Direction, Mode, Protection, SessionParams

log = logging.getLogger(__name__)

# the shared read queue's dequeue operation
lfrq_next = Lfrq.next


@dataclass(frozen=True)
class TransferReport:
    direction: str
    remote_path: str
    local_path: str | None
    bytes_moved: int
    elapsed: float
    per_stream: tuple[int, ...]
    n: int
    block: int
    window: int
    granted_window: int
    errors: int = 0
    verified: bool = False

    @property
    def throughput(self) -> float:
        return self.bytes_moved / self.elapsed if self.elapsed > 0 else 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_stream"] = list(self.per_stream)
        out["throughput"] = self.throughput
        return out


@dataclass
class FtsmSession:
    """``n`` FTSM connections bound to one GUID."""

    endpoint: Endpoint
    security: Security
    n: int = 4
    window: int = 0
    block: int = wire.DEFAULT_BLOCK
    timeout: float = 30.0
    selector_factory: SelectorFactory = field(default=default_selector, repr=False)
    # hook(stream_index, frame_number, channel), called per data frame
    frame_hook: FrameHook | None = field(default=None, repr=False)
    guid: bytes = field(default_factory=wire.new_guid)
    streams: list = field(default_factory=list, repr=False)
    granted_window: int = 0
    transfers: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("stream count must be >= 1")
        self.protection = self.security.protection_for(Mode.FTSM)

    @property
    def is_open(self) -> bool:
        return bool(self.streams)

    def _params(self, direction: Direction, path: str, offset: int, length: int) -> SessionParams:
        return SessionParams(self.guid, self.n, self.window, direction, path, offset, length, self.block)

    def negotiate(self, direction: Direction, path: str, offset: int = 0, length: int = 0) -> int:
        """Send the session header on every stream (or reuse); returns the span."""
        params = self._params(direction, path, offset, length)
        semi = self.protection == Protection.SEMI_SECURE
        if not self.streams:
            try:
                for _ in range(self.n):
                    chan = open_channel(self.endpoint, self.security, Mode.FTSM,
                                        timeout=self.timeout, window=self.window or None)
                    self.streams.append(chan)
                    chan.send(params.encode())
                    chan.begin_message()
                    self.granted_window, span = wire.read_params_ack(chan)
                    if semi:
                        chan.switch_to_plaintext()
            except BaseException:
                self.abort()
                raise
            return span
        first = self.streams[0]
        if semi:
            first.rearm()
        first.send(b"\x01" + params.encode())
        first.begin_message()
        try:
            self.granted_window, span = wire.read_params_ack(first)
        except DotDfsError:
            self.abort()
            raise
        if semi:
            first.switch_to_plaintext()
        return span

    def send(self, source: Lfrq) -> list[int]:
        """Pump ``source`` over the streams, then collect each completion status."""
        try:
            sent = send_frames(self.streams, source, selector_factory=self.selector_factory,
                               io_timeout=self.timeout, on_frame=self.frame_hook)
            statuses = []
            for chan in self.streams:
                chan.begin_message()
                statuses.append(wire.read_status(chan))
        except (DotDfsError, OSError) as exc:
            self.abort()
            raise _aborted(exc) from exc
        finally:
            source.close()
        for status, message in statuses:
            if status:
                self.abort()
                raise error_from_status(status, message)
        return sent

    def receive(self, writer: CoalescingWriter, span: int, bounds: tuple[int, int]) -> list[int]:
        try:
            got = receive_frames(self.streams, writer, selector_factory=self.selector_factory,
                                 io_timeout=self.timeout, frame_buffer=FrameBuffer(self.block),
                                 bounds=bounds, on_frame=self.frame_hook)
        except (DotDfsError, OSError) as exc:
            self.abort()
            raise _aborted(exc) from exc
        if sum(got) != span:
            self.abort()
            raise TransferAborted(f"received {sum(got)} of {span} bytes")
        return got

    def close(self) -> None:
        """Tell the server no further transfer follows and disconnect."""
        if not self.streams:
            return
        try:
            self.streams[0].send(b"\x00")
        except DotDfsError:
            pass
        self.abort()

    def abort(self) -> None:
        for chan in self.streams:
            chan.close()
        self.streams = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- transfers ----------------------------------------------------------

    def _report(self, direction, remote, local, started, per_stream, verified=False) -> TransferReport:
        self.transfers += 1
        return TransferReport(direction, remote, str(local) if local is not None else None,
                              sum(per_stream), time.perf_counter() - started, tuple(per_stream),
                              self.n, self.block, self.window, self.granted_window, verified=verified)

    def upload(self, local_path: str | os.PathLike, remote_path: str, *,
               offset: int = 0, length: int = 0) -> TransferReport:
        """Upload a file, or the fragment ``[offset, offset + length)`` of it."""
        local_path = Path(local_path)
        size = local_path.stat().st_size
        if offset and not length:
            length = size - offset
        if offset or length:
            if offset + length > size:
                raise ValueError(f"range [{offset}, {offset + length}) exceeds local size {size}")
            span = length
        else:
            span = size
        started = time.perf_counter()
        self.negotiate(Direction.UPLOAD, remote_path, offset, length)
        per_stream = self.send(Lfrq(local_path, offset, span, self.block))
        return self._report("upload", remote_path, local_path, started, per_stream)

    def download(self, remote_path: str, local_path: str | os.PathLike, *,
                 offset: int = 0, length: int = 0) -> TransferReport:
        """Download a file or fragment; whole files land via ``<name>.part``."""
        local_path = Path(local_path)
        started = time.perf_counter()
        span = self.negotiate(Direction.DOWNLOAD, remote_path, offset, length)
        whole = not (offset or length)
        target = local_path.with_name(local_path.name + ".part") if whole else local_path
        mode = "w+b" if whole or not target.exists() else "r+b"
        with open(target, mode) as fh:
            per_stream = self.receive(CoalescingWriter(fh), span, (offset, offset + span))
        if whole:
            os.replace(target, local_path)
        return self._report("download", remote_path, local_path, started, per_stream)

    def upload_memory(self, size: int) -> TransferReport:
        """Send ``size`` zero bytes that the server discards (no disk on either side)."""
        started = time.perf_counter()
        self.negotiate(Direction.UPLOAD_NULL, "/dev/null", 0, size)
        per_stream = self.send(Lfrq(None, 0, size, self.block, zeros=True, background=False))
        return self._report("upload-memory", "", None, started, per_stream)

    def download_memory(self, size: int) -> TransferReport:
        """Receive ``size`` bytes the server synthesizes, discarding them locally."""
        started = time.perf_counter()
        span = self.negotiate(Direction.DOWNLOAD_ZERO, "/dev/zero", 0, size)
        per_stream = self.receive(CoalescingWriter(NullSink(), verify_overlap=False), span, (0, span))
        return self._report("download-memory", "", None, started, per_stream)


def _aborted(exc: BaseException) -> TransferAborted:
    if isinstance(exc, TransferAborted):
        return exc
    return TransferAborted(f"transfer aborted: {exc}")


def _verify(endpoint: Endpoint, security: Security, remote_path: str, local_path: Path,
            timeout: float) -> None:
    with PathClient.connect(endpoint, security, timeout=timeout) as pc:
        remote = pc.checksum(remote_path)
    local = file_sha256(local_path)
    if remote != local:
        raise IntegrityFailure(f"checksum mismatch for {remote_path}")


def upload(endpoint: Endpoint, security: Security, local_path: str | os.PathLike, remote_path: str, *,
           n: int = 4, window: int = 0, block: int = wire.DEFAULT_BLOCK,
           offset: int = 0, length: int = 0, verify: bool = False, timeout: float = 30.0,
           **session_kwargs) -> TransferReport:
    with FtsmSession(endpoint, security, n, window, block, timeout, **session_kwargs) as session:
        report = session.upload(local_path, remote_path, offset=offset, length=length)
    if verify and not (offset or length):
        _verify(endpoint, security, remote_path, Path(local_path), timeout)
        report = _with_verified(report)
    return report


def download(endpoint: Endpoint, security: Security, remote_path: str, local_path: str | os.PathLike, *,
             n: int = 4, window: int = 0, block: int = wire.DEFAULT_BLOCK,
             offset: int = 0, length: int = 0, verify: bool = False, timeout: float = 30.0,
             **session_kwargs) -> TransferReport:
    with FtsmSession(endpoint, security, n, window, block, timeout, **session_kwargs) as session:
        report = session.download(remote_path, local_path, offset=offset, length=length)
    if verify and not (offset or length):
        _verify(endpoint, security, remote_path, Path(local_path), timeout)
        report = _with_verified(report)
    return report


def _with_verified(report: TransferReport) -> TransferReport:
    return replace(report, verified=True)
