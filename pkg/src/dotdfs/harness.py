"""Test and measurement scaffolding.

Loopback server fixtures, seeded fault plans, a controllable clock, wire
fuzzers, the synthetic directory-tree generator and a throughput
recorder emitting the CSV format :mod:`dotdfs.wanmodel` reads.
"""

from __future__ import annotations

import errno
import hashlib
import math
import os
import random
import shutil
import socket
import tempfile
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from . import dotsec, wire
from .connection import Endpoint, Security
from .errors import DiskFull
from .server import DotDfsServer, ServerConfig
from .wanmodel import ThroughputSample, save_samples

TEST_USER = "tester"
TEST_PASSWORD = "correct horse"

_keypair_lock = threading.Lock()
_keypair = None


def shared_keypair():
    """One RSA-2048 key per process; key generation dominates fixture start-up otherwise."""
    global _keypair
    with _keypair_lock:
        if _keypair is None:
            _keypair = dotsec.generate_keypair()
        return _keypair


class FakeClock:
    """Monotonic clock that only moves when told to."""

    def __init__(self, start: float = 1000.0):
        self._now = start
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> None:
        with self._lock:
            self._now += seconds


@dataclass
class LoopbackFixture:
    server: DotDfsServer
    endpoint: Endpoint
    root: Path
    security: Security
    credentials: dotsec.CredentialStore
    _tmp: tempfile.TemporaryDirectory | None = field(default=None, repr=False)

    def path(self, rel: str) -> Path:
        return self.root / rel.lstrip("/")

    def security_for(self, **kwargs) -> Security:
        from dataclasses import replace

        return replace(self.security, **kwargs)


@contextmanager
def spawn_loopback(root: str | os.PathLike | None = None, *, users: dict[str, str] | None = None,
                   **config) -> Iterator[LoopbackFixture]:
    """Run an in-process server on an ephemeral loopback port with a temp root."""
    tmp = None
    if root is None:
        tmp = tempfile.TemporaryDirectory(prefix="dotdfs-root-")
        root = tmp.name
    store = dotsec.CredentialStore()
    for user, password in (users or {TEST_USER: TEST_PASSWORD}).items():
        store.add_user(user, password)
    config.setdefault("host", "127.0.0.1")
    config.setdefault("port", 0)
    config.setdefault("grace", 0.0)
    server = DotDfsServer(ServerConfig(root=str(root), **config), keypair=shared_keypair(), credentials=store)
    server.start()
    user, password = next(iter((users or {TEST_USER: TEST_PASSWORD}).items()))
    fixture = LoopbackFixture(server, Endpoint(*server.address), Path(server.root.root),
                              Security(dotsec.Credential(user, password)), store, tmp)
    try:
        yield fixture
    finally:
        server.stop(grace=config["grace"])
        if tmp is not None:
            tmp.cleanup()


# -- fault injection ---------------------------------------------------------

ACTIONS = ("reset", "truncate", "flip", "delay")


@dataclass(frozen=True)
class FaultPlan:
    """Inject one fault when stream ``stream`` is about to send frame ``frame``.

    ``stream=None`` matches any stream.  Use as a frame hook on the sending
    side (``FtsmSession.frame_hook`` or ``ServerConfig.send_hook``).
    """

    action: str
    stream: int | None = 0
    frame: int = 0
    bit: int = 0
    delay_ms: float = 0.0

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown fault action {self.action!r}")

    @classmethod
    def random(cls, seed: int, n: int, frames: int, actions=ACTIONS) -> "FaultPlan":
        rng = random.Random(seed)
        return cls(rng.choice(actions), rng.randrange(n), rng.randrange(max(frames, 1)),
                   rng.randrange(16), rng.uniform(1, 20))

    def __call__(self, stream_index: int, frame_number: int, chan) -> None:
        if frame_number != self.frame or (self.stream is not None and stream_index != self.stream):
            return
        self.inject(chan)

    def inject(self, chan) -> None:
        sock = chan.sock if hasattr(chan, "sock") else chan
        if self.action == "delay":
            time.sleep(self.delay_ms / 1000)
            return
        try:
            if self.action == "truncate":
                sock.sendall(b"\x03\x01\x00")  # a header cut short
            elif self.action == "flip":
                # an otherwise plausible header with one bit flipped in its mode bytes
                header = bytearray(wire.encode_frame_header(0, 1))
                header[self.bit % 2] ^= 1 << (4 + self.bit % 4)
                sock.sendall(bytes(header))
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass


def misbehaving_handshake(endpoint: Endpoint, action: str, rng: random.Random | None = None,
                          hold: float = 0.0) -> bytes:
    """Open a raw connection and break the opening exchange; returns what the server sent.

    ``silent`` sends the service byte and waits ``hold`` seconds, ``garbage``
    answers the key exchange with random bytes, ``reset`` closes right away.
    """
    rng = rng or random.Random(0)
    sock = socket.create_connection((endpoint.host, endpoint.port), timeout=5)
    received = b""
    try:
        sock.sendall(b"\x00")
        if action == "reset":
            return received
        if action == "silent":
            time.sleep(hold)
        elif action == "garbage":
            sock.sendall(bytes(rng.getrandbits(8) for _ in range(rng.randrange(1, 600))))
        sock.settimeout(max(hold, 1.0))
        try:
            while True:
                chunk = sock.recv(65536)
                if not chunk:
                    break
                received += chunk
        except OSError:
            pass
        return received
    finally:
        sock.close()


# -- wire fuzzers ---------------------------------------------------------------

def random_varuint(rng: random.Random) -> int:
    """Values spread evenly over bit lengths 0..64."""
    bits = rng.randrange(65)
    return 0 if bits == 0 else rng.getrandbits(bits) | (1 << (bits - 1))


def random_frame(rng: random.Random, max_payload: int = 64) -> wire.TransferFrame:
    return wire.TransferFrame(random_varuint(rng), rng.randbytes(rng.randint(1, max_payload)))


def mutate(data: bytes, rng: random.Random) -> bytes:
    """Flip one random bit."""
    buf = bytearray(data)
    i = rng.randrange(len(buf))
    buf[i] ^= 1 << rng.randrange(8)
    return bytes(buf)


# -- tree generator -----------------------------------------------------------------

@dataclass(frozen=True)
class TreeSpec:
    files: int = 1000
    dirs: int = 100
    min_size: int = 1024
    max_size: int = 512 * 1024
    seed: int = 42


def gen_tree(dest: str | os.PathLike, shape: TreeSpec = TreeSpec()) -> dict[str, tuple[int, str]]:
    """Write a seeded random tree; returns ``{rel path: (size, sha256 hex)}``.

    Directories nest under a randomly chosen earlier directory; file sizes
    are log-uniform over ``[min_size, max_size]``.
    """
    rng = random.Random(shape.seed)
    dest = Path(dest)
    dirs = [""]
    for i in range(shape.dirs):
        parent = rng.choice(dirs)
        rel = f"{parent}/d{i:03d}" if parent else f"d{i:03d}"
        dirs.append(rel)
    manifest: dict[str, tuple[int, str]] = {}
    lo, hi = math.log(shape.min_size), math.log(shape.max_size)
    try:
        for rel in dirs:
            (dest / rel).mkdir(parents=True, exist_ok=True)
        subdirs = dirs[1:] or dirs
        for i in range(shape.files):
            rel = f"{rng.choice(subdirs)}/f{i:04d}.bin".lstrip("/")
            size = int(round(math.exp(rng.uniform(lo, hi))))
            data = rng.randbytes(size)
            (dest / rel).write_bytes(data)
            manifest[rel] = (size, hashlib.sha256(data).hexdigest())
    except OSError as exc:
        if exc.errno == errno.ENOSPC:
            raise DiskFull(str(exc)) from exc
        raise
    return manifest


def write_random_file(path: str | os.PathLike, size: int, seed: int = 0, chunk: int = 4 << 20) -> str:
    """Seeded random file; returns its sha256 hex."""
    rng = random.Random(seed)
    digest = hashlib.sha256()
    with open(path, "wb") as fh:
        left = size
        while left:
            data = rng.randbytes(min(chunk, left))
            fh.write(data)
            digest.update(data)
            left -= len(data)
    return digest.hexdigest()


def remove_tree(path: str | os.PathLike) -> None:
    shutil.rmtree(path, ignore_errors=True)


# -- throughput recording -----------------------------------------------------------

@dataclass
class ThroughputRecorder:
    samples: list[ThroughputSample] = field(default_factory=list)

    def record(self, n: int, window: int, bw: float) -> None:
        self.samples.append(ThroughputSample(n, window, bw))

    def record_report(self, report) -> None:
        self.record(report.n, report.granted_window or report.window, report.throughput)

    def to_csv(self, path: str | os.PathLike) -> None:
        save_samples(self.samples, path)
