"""Client side of connection setup: service byte, DotSec, login and mode.

Every connection in every mode walks the same opening::

    client -> server   service byte (0 = DotDFS)
    server -> client   00 (available) | 0a [len][message]
    ... DotSec key exchange (see :mod:`dotdfs.dotsec`) ...
    client -> server   sealed [user][password][mode][protection]
    server -> client   sealed [status][len][message]
"""

from __future__ import annotations

import os
import socket
from dataclasses import dataclass, field
from typing import Callable
from urllib.parse import urlsplit

from . import dotsec, wire
from .errors import ConnectFailed, UnsupportedService, error_from_status


@dataclass(frozen=True)
class Endpoint:
    host: str
    port: int = wire.DEFAULT_PORT

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        host, sep, port = text.rpartition(":")
        if not sep or "]" in port:
            return cls(text)
        return cls(host.strip("[]"), int(port))

    def __str__(self):
        return f"{self.host}:{self.port}"


@dataclass(frozen=True)
class RemoteUrl:
    """``dotdfs://[user@]host[:port]/path``"""

    endpoint: Endpoint
    path: str
    user: str | None = None

    @classmethod
    def parse(cls, text: str) -> "RemoteUrl":
        parts = urlsplit(text)
        if parts.scheme != "dotdfs" or not parts.hostname:
            raise ValueError(f"not a dotdfs:// URL: {text}")
        return cls(Endpoint(parts.hostname, parts.port or wire.DEFAULT_PORT),
                   parts.path or "/", parts.username)

    @staticmethod
    def is_remote(text: str) -> bool:
        return text.startswith("dotdfs://")


@dataclass(frozen=True)
class Security:
    credential: dotsec.Credential
    suite: dotsec.CipherSuite = dotsec.DEFAULT_SUITE
    # None picks the per-mode default: plaintext bulk data for FTSM,
    # full encryption for PathM and DFSM
    protection: wire.Protection | None = None
    rng: Callable[[int], bytes] = field(default=os.urandom, compare=False)

    def protection_for(self, mode: wire.Mode) -> wire.Protection:
        if self.protection is not None:
            return self.protection
        return wire.Protection.SEMI_SECURE if mode == wire.Mode.FTSM else wire.Protection.ENCRYPTED


def open_channel(endpoint: Endpoint, security: Security, mode: wire.Mode, *,
                 timeout: float = 30.0, window: int | None = None) -> dotsec.TsiChannel:
    """Connect, verify, authenticate and select ``mode``; returns the channel."""
    try:
        sock = socket.create_connection((endpoint.host, endpoint.port), timeout=timeout)
    except OSError as exc:
        raise ConnectFailed(f"cannot connect to {endpoint}: {exc}") from None
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    if window:
        apply_window(sock, window)
    chan = dotsec.TsiChannel(sock, io_timeout=timeout)
    try:
        chan.send(bytes((wire.ServiceByte.DOTDFS,)))
        reply = chan.recv_exact(1)[0]
        if reply != 0:
            raise UnsupportedService(wire.read_str(chan))
        dotsec.client_secure(chan, security.suite, security.rng)
        protection = security.protection_for(mode)
        chan.send(security.credential.encode() + bytes((mode, protection)))
        status, message = wire.read_status(chan)
        if status:
            raise error_from_status(status, message)
        if protection == wire.Protection.SEMI_SECURE and mode != wire.Mode.FTSM:
            chan.switch_to_plaintext()
    except BaseException:
        chan.close()
        raise
    return chan


def apply_window(sock: socket.socket, window: int) -> int:
    """Request ``window`` bytes of socket buffer; returns the granted size."""
    for opt in (socket.SO_SNDBUF, socket.SO_RCVBUF):
        try:
            sock.setsockopt(socket.SOL_SOCKET, opt, window)
        except OSError:
            pass
    return sock.getsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF)
