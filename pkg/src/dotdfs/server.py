"""The DotDFS daemon.

One acceptor thread listens on a single port.  Each accepted connection
gets a short-lived thread for the service byte, DotSec handshake and login;
PathM and DFSM connections are then served on that thread.  FTSM streams
are handed to their session (keyed by GUID) and the thread exits, so each
transfer session runs on exactly one manager thread that first waits for
all ``n`` streams and then multiplexes them with a readiness selector.
"""

from __future__ import annotations

import logging
import os
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

from . import dotsec, wire
from .blockio import (
    CoalescingWriter,
    FrameBuffer,
    Lfrq,
    NullSink,
    SelectorFactory,
    default_selector,
    receive_frames,
    send_frames,
)
from .cfsm import State, Tracer
from .dfsm import DfsmHandler, ShareTable
from .errors import (
    AuthFailed,
    BindFailed,
    ConfigError,
    DotDfsError,
    DuplicateStream,
    HandshakeTimeout,
    IoError,
    MalformedFrame,
    NotFound,
    ParamMismatch,
    PeerReset,
    PoolFull,
    Status,
    UnsupportedService,
    status_of,
)
from .pathm import SMALL_FILE_THRESHOLD, PathmHandler
from .paths import FsRoot
from .wire import Direction, Mode, Protection, SessionParams

log = logging.getLogger(__name__)


@dataclass
class ServerConfig:
    root: str = "."
    host: str = "0.0.0.0"
    port: int = wire.DEFAULT_PORT
    session_cap: int = 64
    wlm_timeout: float = 60.0
    handshake_timeout: float = 30.0
    io_timeout: float = 60.0
    keypair: str | None = None
    credentials: str | None = None
    log_level: str = "INFO"
    small_file_threshold: int = SMALL_FILE_THRESHOLD
    grace: float = 10.0
    fsync: bool = False
    allowed_suites: tuple = dotsec.ALL_SUITES
    selector_factory: SelectorFactory = field(default=default_selector, repr=False)
    clock: Callable[[], float] = field(default=time.monotonic, repr=False)
    # called as hook(stream_index, frame_number, channel) on each outgoing frame
    send_hook: Callable | None = field(default=None, repr=False)

    _KEYS = {
        "port": int, "root": str, "host": str, "session_cap": int, "wlm_timeout": float,
        "handshake_timeout": float, "io_timeout": float, "keypair": str, "credentials": str,
        "log_level": str, "small_file_threshold": int, "grace": float,
        "fsync": lambda v: v.lower() in ("1", "true", "yes", "on"),
    }

    @classmethod
    def from_file(cls, path: str | os.PathLike, **overrides) -> "ServerConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        values = {}
        for lineno, raw in enumerate(Path(path).read_text("utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (part.strip() for part in line.partition("="))
            if not sep or key not in cls._KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown or malformed setting {raw!r}")
            try:
                values[key] = cls._KEYS[key](value)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


class SessionState(Enum):
    WAITING = "waiting"
    TRANSFERRING = "transferring"
    DONE = "done"
    FAILED = "failed"


@dataclass
class SessionEntry:
    guid: bytes
    params: SessionParams
    principal: dotsec.Principal
    protection: int
    target: Path | None
    span: int
    tracer: Tracer
    streams: list = field(default_factory=list)
    reserved: int = 1
    current_received_streams: int = 0
    state: SessionState = SessionState.WAITING
    manager: threading.Thread | None = None
    buffer_allocated: int = 0
    bytes_moved: int = 0
    transfers: int = 0
    cond: threading.Condition = field(default_factory=threading.Condition, repr=False)

    def commit(self, chan, joined: bool) -> None:
        with self.cond:
            if joined:
                self.tracer(State.STREAM_ADDED)
                self.tracer(State.WAITING)
            self.streams.append(chan)
            self.current_received_streams += 1
            self.cond.notify_all()


def _same_request(a: SessionParams, b: SessionParams) -> bool:
    return (a.n, a.window, a.direction, a.path, a.offset, a.length, a.block) == \
           (b.n, b.window, b.direction, b.path, b.offset, b.length, b.block)


class SessionPool:
    """GUID-keyed table of live FTSM sessions."""

    def __init__(self, cap: int = 64):
        self.cap = cap
        self._lock = threading.Lock()
        self._entries: dict[bytes, SessionEntry] = {}

    def reserve(self, params: SessionParams, make_entry: Callable[[], SessionEntry]) -> tuple[SessionEntry, bool]:
        """Claim a stream slot; returns ``(entry, created)``."""
        with self._lock:
            entry = self._entries.get(params.guid)
            if entry is None:
                if len(self._entries) >= self.cap:
                    raise PoolFull(f"session cap {self.cap} reached")
                entry = make_entry()
                self._entries[params.guid] = entry
                return entry, True
            if not _same_request(entry.params, params):
                raise ParamMismatch("stream parameters differ from the session's")
            if entry.state is not SessionState.WAITING or entry.reserved >= entry.params.n:
                raise DuplicateStream(f"session already has {entry.params.n} streams")
            entry.reserved += 1
            return entry, False

    def unreserve(self, entry: SessionEntry) -> None:
        with self._lock:
            entry.reserved -= 1

    def remove(self, guid: bytes) -> None:
        with self._lock:
            self._entries.pop(guid, None)

    def get(self, guid: bytes) -> SessionEntry | None:
        with self._lock:
            return self._entries.get(guid)

    def __contains__(self, guid: bytes) -> bool:
        return self.get(guid) is not None

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


@dataclass
class ServerStats:
    managers_active: int = 0
    managers_peak: int = 0
    sessions_done: int = 0
    sessions_failed: int = 0
    fs_ops: int = 0
    connections: int = 0
    session_buffers: dict = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def manager_started(self) -> None:
        with self.lock:
            self.managers_active += 1
            self.managers_peak = max(self.managers_peak, self.managers_active)

    def manager_finished(self, ok: bool) -> None:
        with self.lock:
            self.managers_active -= 1
            if ok:
                self.sessions_done += 1
            else:
                self.sessions_failed += 1

    def fs(self, n: int = 1) -> None:
        with self.lock:
            self.fs_ops += n


class DotDfsServer:
    def __init__(self, config: ServerConfig, keypair=None, credentials: dotsec.CredentialStore | None = None):
        self.config = config
        self.root = FsRoot(config.root)
        if keypair is None:
            if config.keypair:
                keypair = dotsec.load_keypair(config.keypair)
            else:
                log.warning("no keypair configured; generating an ephemeral 2048-bit key")
                keypair = dotsec.generate_keypair()
        self.keypair = keypair
        self.hello = dotsec.server_hello(keypair)
        if credentials is None:
            if not config.credentials:
                raise ConfigError("a credential file is required")
            credentials = dotsec.CredentialStore.load(config.credentials)
        self.credentials = credentials
        self.pool = SessionPool(config.session_cap)
        self.shares = ShareTable()
        self.stats = ServerStats()
        self.stream_traces: deque[Tracer] = deque(maxlen=10_000)
        self.session_traces: deque[Tracer] = deque(maxlen=10_000)
        self._listener: socket.socket | None = None
        self._acceptor: threading.Thread | None = None
        self._stopping = threading.Event()
        self._live = set()
        self._live_lock = threading.Lock()
        self._threads: set[threading.Thread] = set()

    # -- lifecycle ----------------------------------------------------------

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def start(self) -> "DotDfsServer":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.config.host, self.config.port))
        except OSError as exc:
            sock.close()
            raise BindFailed(f"cannot bind {self.config.host}:{self.config.port}: {exc}") from None
        sock.listen(128)
        sock.settimeout(0.2)
        self._listener = sock
        self._acceptor = threading.Thread(target=self._accept_loop, name="dotdfs-acceptor", daemon=True)
        self._acceptor.start()
        log.info("listening on %s:%d root=%s", *self.address, self.root.root)
        return self

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with self.stats.lock:
                self.stats.connections += 1
            self._spawn(self.accept_and_dispatch, conn, name=f"dotdfs-conn-{peer[1]}")

    def _spawn(self, target, *args, name: str) -> threading.Thread:
        t = threading.Thread(target=self._run_tracked, args=(target, *args), name=name, daemon=True)
        with self._live_lock:
            self._threads.add(t)
        t.start()
        return t

    def _run_tracked(self, target, *args) -> None:
        try:
            target(*args)
        finally:
            with self._live_lock:
                self._threads.discard(threading.current_thread())

    def active_threads(self) -> int:
        with self._live_lock:
            return len(self._threads)

    def stop(self, grace: float | None = None) -> None:
        """Stop accepting; let active sessions drain for ``grace`` seconds."""
        grace = self.config.grace if grace is None else grace
        self._stopping.set()
        if self._listener is not None:
            self._listener.close()
        if self._acceptor is not None:
            self._acceptor.join(timeout=2)
        deadline = time.monotonic() + grace
        while self.active_threads() and time.monotonic() < deadline:
            time.sleep(0.02)
        self.abort_all()
        end = time.monotonic() + 2
        while self.active_threads() and time.monotonic() < end:
            time.sleep(0.02)

    def abort_all(self) -> None:
        """Hard-close every live connection (fault injection and shutdown)."""
        with self._live_lock:
            chans = list(self._live)
        for chan in chans:
            try:
                chan.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            chan.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop(grace=0)

    def _track(self, chan) -> None:
        with self._live_lock:
            self._live.add(chan)

    def _untrack(self, chan) -> None:
        with self._live_lock:
            self._live.discard(chan)
        chan.close()

    # -- per connection -----------------------------------------------------

    def accept_and_dispatch(self, sock: socket.socket) -> None:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        chan = dotsec.TsiChannel(sock, io_timeout=self.config.io_timeout, clock=self.config.clock)
        self._track(chan)
        tracer = Tracer("stream", start=State.ACCEPTED)
        self.stream_traces.append(tracer)
        handed_off = False
        try:
            chan.set_deadline(self.config.handshake_timeout)
            service = chan.recv_exact(1)[0]
            if service != wire.ServiceByte.DOTDFS:
                known = wire.ServiceByte._value2member_map_.get(service)
                name = known.name if known is not None else f"code {service}"
                chan.send(wire.encode_error_frame(f"service {name} is not available"))
                raise UnsupportedService(f"service byte {service}")
            chan.send(b"\x00")
            tracer(State.SERVICE_SELECTED)
            tracer(State.KEY_EXCHANGE)
            dotsec.server_secure(chan, self.keypair, self.config.allowed_suites, self.hello)
            tracer(State.VERIFIED)
            principal, mode, protection = self._login(chan)
            tracer(State.AUTHENTICATED)
            if mode == Mode.FTSM:
                handed_off = self._ftsm_stream(chan, principal, protection, tracer)
                return
            chan.set_deadline(None)
            if protection == Protection.SEMI_SECURE:
                chan.switch_to_plaintext()
            if mode == Mode.PATHM:
                PathmHandler(self.root, principal, self.config.small_file_threshold, self.config.fsync).serve(chan)
            else:
                DfsmHandler(self.root, principal, self.shares).serve(chan)
        except HandshakeTimeout as exc:
            log.info("handshake timeout: %s", exc)
            tracer(State.ERROR)
        except (DotDfsError, OSError) as exc:
            log.info("connection failed in state %s: %s", tracer.state, exc)
            tracer(State.ERROR)
        except Exception:
            log.exception("unexpected connection failure")
            tracer(State.ERROR)
        finally:
            if not handed_off:
                self._untrack(chan)

    def _login(self, chan) -> tuple[dotsec.Principal, Mode, int]:
        chan.begin_message()
        credential = dotsec.Credential.read(chan)
        raw_mode, protection = chan.recv_exact(2)
        try:
            principal = dotsec.authenticate(credential, self.credentials)
        except AuthFailed:
            chan.send(wire.encode_status(Status.AUTH_FAILED, "authentication failed"))
            raise
        try:
            mode = Mode(raw_mode)
            protection = Protection(protection)
        except ValueError:
            chan.send(wire.encode_status(Status.UNSUPPORTED, f"unsupported mode {raw_mode}"))
            raise UnsupportedService(f"mode {raw_mode}") from None
        chan.send(wire.encode_status(Status.OK))
        return principal, mode, protection

    def _prepare(self, params: SessionParams, principal) -> tuple[Path | None, int]:
        """Validate a transfer request; returns ``(target, span)``."""
        if params.direction.is_memory:
            return None, params.length
        target = self.root.resolve(params.path)
        self.stats.fs()
        if params.direction == Direction.UPLOAD:
            principal.require("w", "upload")
            if not target.parent.is_dir():
                raise NotFound("parent directory does not exist")
            if target.is_dir():
                raise IoError("target is a directory")
            return target, params.length
        principal.require("r", "download")
        if not target.is_file():
            raise NotFound(f"{params.path} not found")
        size = target.stat().st_size
        if params.offset > size:
            raise MalformedFrame(f"offset {params.offset} beyond file size {size}")
        span = size - params.offset if params.length == 0 else params.length
        if params.offset + span > size:
            raise MalformedFrame(f"range [{params.offset}, {params.offset + span}) beyond file size {size}")
        return target, span

    def _ftsm_stream(self, chan, principal, protection: int, tracer: Tracer) -> bool:
        params = SessionParams.read(chan)
        tracer(State.PARAMS_RECEIVED)
        chan.set_deadline(None)
        try:
            target, span = self._prepare(params, principal)

            def make_entry():
                session_tracer = Tracer("session", params.guid.hex(), start=State.PARAMS_RECEIVED)
                return SessionEntry(params.guid, params, principal, protection, target, span, session_tracer)

            entry, created = self.pool.reserve(params, make_entry)
        except (DotDfsError, OSError) as exc:
            chan.send(wire.encode_status(status_of(exc), str(exc)))
            raise
        granted = params.window
        if params.window:
            granted = _apply_window(chan.sock, params.window)
        try:
            chan.send(wire.encode_params_ack(granted, span))
            if protection == Protection.SEMI_SECURE:
                chan.switch_to_plaintext()
                chan.await_plaintext()
        except BaseException:
            if created:
                self.pool.remove(params.guid)
            else:
                self.pool.unreserve(entry)
            raise
        if created:
            tracer(State.WAITING)
            self.session_traces.append(entry.tracer)
            entry.tracer(State.WAITING)
            entry.commit(chan, joined=False)
            entry.manager = self._spawn(self._run_session, entry, name=f"dotdfs-session-{params.guid.hex()[:8]}")
        else:
            tracer(State.STREAM_ADDED)
            entry.commit(chan, joined=True)
        return True

    # -- session manager ----------------------------------------------------

    def _wait_for_streams(self, entry: SessionEntry) -> None:
        clock = self.config.clock
        deadline = clock() + self.config.wlm_timeout
        with entry.cond:
            while entry.current_received_streams < entry.params.n:
                if clock() > deadline:
                    raise HandshakeTimeout(
                        f"only {entry.current_received_streams}/{entry.params.n} streams arrived")
                entry.cond.wait(0.05)

    def _run_session(self, entry: SessionEntry) -> None:
        self.stats.manager_started()
        trace = entry.tracer
        ok = False
        try:
            self._wait_for_streams(entry)
            while True:
                trace(State.PIOE_START)
                entry.state = SessionState.TRANSFERRING
                started = time.monotonic()
                moved = self._transfer(entry)
                entry.bytes_moved += moved
                entry.transfers += 1
                elapsed = max(time.monotonic() - started, 1e-9)
                trace(State.RELEASED)
                log.info("session %s %s %s bytes=%d %.1f MB/s", entry.guid.hex(), entry.params.direction.name,
                         entry.params.path, moved, moved / elapsed / 1e6)
                entry.state = SessionState.DONE
                if not self._await_reuse(entry):
                    break
                trace(State.WAITING)
            ok = True
        except Exception as exc:
            if trace.state is not State.RELEASED:
                trace(State.ERROR)
            entry.state = SessionState.FAILED
            log.info("session %s failed: %s", entry.guid.hex(), exc)
        finally:
            self.pool.remove(entry.guid)
            for chan in entry.streams:
                self._untrack(chan)
            self.stats.session_buffers[entry.guid] = entry.buffer_allocated
            self.stats.manager_finished(ok)

    def _await_reuse(self, entry: SessionEntry) -> bool:
        """Wait on stream 1 for ``00`` (close) or ``01`` + new SessionParams."""
        chan = entry.streams[0]
        try:
            chan.begin_message()
            flag = chan.recv_exact(1)[0]
        except PeerReset:
            return False
        if flag == 0:
            return False
        if flag != 1:
            raise MalformedFrame(f"bad continuation byte {flag}")
        params = SessionParams.read(chan)
        entry.tracer(State.PARAMS_RECEIVED)
        try:
            if params.guid != entry.guid or params.n != entry.params.n:
                raise ParamMismatch("reused session must keep its GUID and stream count")
            target, span = self._prepare(params, entry.principal)
        except (DotDfsError, OSError) as exc:
            chan.send(wire.encode_status(status_of(exc), str(exc)))
            raise
        granted = _apply_window(chan.sock, params.window) if params.window else params.window
        chan.send(wire.encode_params_ack(granted, span))
        if entry.protection == Protection.SEMI_SECURE:
            chan.await_plaintext()
        entry.params, entry.target, entry.span = params, target, span
        return True

    def _transfer(self, entry: SessionEntry) -> int:
        if entry.params.direction.is_upload:
            return self._pioe_upload(entry)
        return self._pioe_download(entry)

    def _pioe_upload(self, entry: SessionEntry) -> int:
        params = entry.params
        trace = entry.tracer
        fbuf = FrameBuffer(params.block or wire.DEFAULT_BLOCK)
        bounds = (params.offset, params.offset + params.length) if params.is_fragment else None
        if params.direction == Direction.UPLOAD_NULL:
            fh, part = NullSink(), None
        else:
            target = entry.target
            part = target.with_name(target.name + ".part") if not params.is_fragment else None
            if part is not None:
                fh = open(part, "w+b")
            else:
                fh = open(target, "r+b" if target.exists() else "w+b")
            self.stats.fs()
        writer = CoalescingWriter(fh, verify_overlap=part is not None or params.is_fragment)
        try:
            trace(State.SELECT)
            received = receive_frames(entry.streams, writer, selector_factory=self.config.selector_factory,
                                      io_timeout=self.config.io_timeout, frame_buffer=fbuf,
                                      bounds=bounds, trace=trace)
            if part is not None or params.is_fragment:
                fh.flush()
        finally:
            entry.buffer_allocated = max(entry.buffer_allocated, writer.allocated + fbuf.allocated)
            if hasattr(fh, "close"):
                fh.close()
        if part is not None:
            os.replace(part, entry.target)
            self.stats.fs()
        for chan in entry.streams:
            chan.send(wire.encode_status(Status.OK))
        return sum(received)

    def _pioe_download(self, entry: SessionEntry) -> int:
        params = entry.params
        block = params.block or wire.DEFAULT_BLOCK
        if params.direction == Direction.DOWNLOAD_ZERO:
            source = Lfrq(None, 0, entry.span, block, background=False, zeros=True)
        else:
            source = Lfrq(entry.target, params.offset, entry.span, block, background=False)
        entry.buffer_allocated = max(entry.buffer_allocated, block)
        try:
            entry.tracer(State.SELECT)
            sent = send_frames(entry.streams, source, selector_factory=self.config.selector_factory,
                               io_timeout=self.config.io_timeout, on_frame=self.config.send_hook,
                               trace=entry.tracer)
        finally:
            source.close()
            if source.files_opened:
                self.stats.fs(source.files_opened)
        return sum(sent)


def _apply_window(sock: socket.socket, window: int) -> int:
    from .connection import apply_window

    return apply_window(sock, window)


def make_server(config: ServerConfig, **kwargs) -> DotDfsServer:
    return DotDfsServer(config, **kwargs)


__all__ = ["ServerConfig", "DotDfsServer", "SessionPool", "SessionEntry", "SessionState", "ServerStats"]
