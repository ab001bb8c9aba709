"""DotSec: one-way client verification, cipher negotiation and TSI framing.

Handshake, after the service byte has been accepted::

    server -> client   RsaPublicHeader   [len][modulus][len][exponent]
    client -> server   SharedKeyHeader   [crypto][hash][len][RSA-OAEP(key|iv|H(key|iv))]
    server -> client   CSP verdict       one byte, 0 = accepted

From then on both directions carry SecuredDataHeader records::

    [mode1=1][mode2=1][len][H(plaintext)][ciphertext]

A record of ``00 00`` switches that direction to plaintext pass-through
(semi-secure).  While a direction is in plaintext, ``ff ff`` at a message
boundary re-arms encryption; no protocol message ever starts with ``0xff``
so the escape is unambiguous.

Each direction chains CBC IVs independently: the first record uses the
exchanged IV, every later record uses the last ciphertext block of the
previous record in the same direction.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import os
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from cryptography.exceptions import InvalidKey
from cryptography.hazmat.decrepit.ciphers.algorithms import TripleDES
from cryptography.hazmat.primitives import hashes, padding as sympadding, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from . import wire
from .errors import (
    AccessDenied,
    AuthFailed,
    DecryptFailed,
    HandshakeTimeout,
    IntegrityFailure,
    MalformedFrame,
    PeerReset,
    TruncatedInput,
    UnsupportedSuite,
    VerificationFailed,
)

log = logging.getLogger(__name__)

MIN_MODULUS_BITS = 2048
MAX_RECORD = 1024 * 1024
SWITCH_MARKER = b"\x00\x00"
REARM_MARKER = b"\xff\xff"

CSP_ACCEPT = 0
CSP_UNSUPPORTED = 1
CSP_VERIFY_FAILED = 2


# -- cipher suites ----------------------------------------------------------

@dataclass(frozen=True)
class _SymAlg:
    name: str
    key_len: int
    iv_len: int
    factory: Callable[[bytes], object]


@dataclass(frozen=True)
class _HashAlg:
    name: str
    digest_len: int
    new: Callable[[], "hashlib._Hash"]


SC_ALGORITHMS = {
    1: _SymAlg("AES-256-CBC", 32, 16, algorithms.AES),
    2: _SymAlg("3DES-CBC", 24, 8, TripleDES),
}

HASH_ALGORITHMS = {
    1: _HashAlg("SHA-1", 20, hashlib.sha1),
    2: _HashAlg("MD5", 16, hashlib.md5),
    3: _HashAlg("SHA-256", 32, hashlib.sha256),
}


@dataclass(frozen=True)
class CipherSuite:
    sc_id: int
    hash_id: int

    def __post_init__(self):
        if self.sc_id not in SC_ALGORITHMS:
            raise UnsupportedSuite(f"unknown cipher id {self.sc_id:#x}")
        if self.hash_id not in HASH_ALGORITHMS:
            raise UnsupportedSuite(f"unknown hash id {self.hash_id:#x}")

    @property
    def key_len(self) -> int:
        return SC_ALGORITHMS[self.sc_id].key_len

    @property
    def iv_len(self) -> int:
        return SC_ALGORITHMS[self.sc_id].iv_len

    @property
    def block_len(self) -> int:
        return SC_ALGORITHMS[self.sc_id].iv_len

    @property
    def digest_len(self) -> int:
        return HASH_ALGORITHMS[self.hash_id].digest_len

    @property
    def name(self) -> str:
        return f"{SC_ALGORITHMS[self.sc_id].name}/{HASH_ALGORITHMS[self.hash_id].name}"

    def digest(self, data: bytes) -> bytes:
        h = HASH_ALGORITHMS[self.hash_id].new()
        h.update(data)
        return h.digest()

    def cipher(self, key: bytes, iv: bytes) -> Cipher:
        return Cipher(SC_ALGORITHMS[self.sc_id].factory(key), modes.CBC(iv))


AES256_SHA1 = CipherSuite(1, 1)
AES256_MD5 = CipherSuite(1, 2)
AES256_SHA256 = CipherSuite(1, 3)
TDES_SHA1 = CipherSuite(2, 1)
TDES_MD5 = CipherSuite(2, 2)
TDES_SHA256 = CipherSuite(2, 3)
DEFAULT_SUITE = AES256_SHA256
ALL_SUITES = (AES256_SHA256, AES256_SHA1, AES256_MD5, TDES_SHA256, TDES_SHA1, TDES_MD5)

SUITES_BY_NAME = {
    "aes256-sha256": AES256_SHA256,
    "aes256-sha1": AES256_SHA1,
    "aes256-md5": AES256_MD5,
    "3des-sha256": TDES_SHA256,
    "3des-sha1": TDES_SHA1,
    "3des-md5": TDES_MD5,
}


@dataclass(frozen=True)
class SessionKey:
    key: bytes
    iv: bytes


# -- RSA public header ------------------------------------------------------

def _int_bytes(value: int) -> bytes:
    return value.to_bytes((value.bit_length() + 7) // 8, "big")


@dataclass(frozen=True)
class RsaPublicHeader:
    modulus: int
    exponent: int

    def validate(self) -> None:
        if self.modulus.bit_length() < MIN_MODULUS_BITS:
            raise MalformedFrame(f"RSA modulus of {self.modulus.bit_length()} bits is too small")
        if self.exponent <= 1 or self.exponent % 2 == 0:
            raise MalformedFrame(f"invalid RSA exponent {self.exponent}")

    def encode(self) -> bytes:
        return wire.encode_bytes(_int_bytes(self.modulus)) + wire.encode_bytes(_int_bytes(self.exponent))

    @classmethod
    def read(cls, src: wire.ByteSource) -> "RsaPublicHeader":
        modulus = int.from_bytes(wire.read_bytes(src, 2048), "big")
        exponent = int.from_bytes(wire.read_bytes(src, 2048), "big")
        header = cls(modulus, exponent)
        header.validate()
        return header

    @classmethod
    def decode(cls, data: bytes) -> "RsaPublicHeader":
        reader = wire.ByteReader(data)
        header = cls.read(reader)
        reader.expect_end()
        return header

    def public_key(self) -> rsa.RSAPublicKey:
        return rsa.RSAPublicNumbers(self.exponent, self.modulus).public_key()


def generate_keypair(bits: int = 2048) -> rsa.RSAPrivateKey:
    return rsa.generate_private_key(public_exponent=65537, key_size=bits)


def load_keypair(path: str | os.PathLike) -> rsa.RSAPrivateKey:
    key = serialization.load_pem_private_key(Path(path).read_bytes(), password=None)
    if not isinstance(key, rsa.RSAPrivateKey):
        raise ValueError(f"{path} does not hold an RSA private key")
    return key


def save_keypair(key: rsa.RSAPrivateKey, path: str | os.PathLike) -> None:
    pem = key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(pem)


def server_hello(keypair: rsa.RSAPrivateKey) -> RsaPublicHeader:
    numbers = keypair.public_key().public_numbers()
    return RsaPublicHeader(numbers.n, numbers.e)


# -- shared key exchange ----------------------------------------------------

_OAEP = padding.OAEP(mgf=padding.MGF1(algorithm=hashes.SHA256()), algorithm=hashes.SHA256(), label=None)


@dataclass(frozen=True)
class SharedKeyHeader:
    crypto: int
    hash_alg: int
    blob: bytes

    def encode(self) -> bytes:
        return bytes((self.crypto, self.hash_alg)) + wire.encode_bytes(self.blob)

    @classmethod
    def read(cls, src: wire.ByteSource) -> "SharedKeyHeader":
        crypto, hash_alg = src.recv_exact(2)
        return cls(crypto, hash_alg, wire.read_bytes(src, 2048))

    @classmethod
    def decode(cls, data: bytes) -> "SharedKeyHeader":
        reader = wire.ByteReader(data)
        header = cls.read(reader)
        reader.expect_end()
        return header


def client_key_exchange(header: RsaPublicHeader, suite: CipherSuite,
                        rng: Callable[[int], bytes] = os.urandom) -> tuple[SharedKeyHeader, SessionKey]:
    header.validate()
    suite = CipherSuite(suite.sc_id, suite.hash_id)
    key = rng(suite.key_len)
    iv = rng(suite.iv_len)
    plain = key + iv + suite.digest(key + iv)
    blob = header.public_key().encrypt(plain, _OAEP)
    return SharedKeyHeader(suite.sc_id, suite.hash_id, blob), SessionKey(key, iv)


def suite_of(header: SharedKeyHeader) -> CipherSuite:
    return CipherSuite(header.crypto, header.hash_alg)


def server_verify(header: SharedKeyHeader, keypair: rsa.RSAPrivateKey,
                  allowed: tuple[CipherSuite, ...] | None = None) -> SessionKey:
    """Decrypt the client's shared key and check its embedded hash."""
    suite = suite_of(header)
    if allowed is not None and suite not in allowed:
        raise UnsupportedSuite(f"suite {suite.name} not permitted")
    try:
        plain = keypair.decrypt(header.blob, _OAEP)
    except (ValueError, InvalidKey) as exc:
        raise DecryptFailed(f"RSA decryption failed: {exc}") from None
    expected_len = suite.key_len + suite.iv_len + suite.digest_len
    if len(plain) != expected_len:
        raise VerificationFailed(f"shared key blob is {len(plain)} bytes, expected {expected_len}")
    key_iv = plain[:suite.key_len + suite.iv_len]
    if not hmac.compare_digest(suite.digest(key_iv), plain[len(key_iv):]):
        raise VerificationFailed("shared key hash mismatch")
    return SessionKey(key_iv[:suite.key_len], key_iv[suite.key_len:])


# -- TSI records ------------------------------------------------------------

class _SwitchToPlaintext:
    def __repr__(self):
        return "SwitchToPlaintext"


SwitchToPlaintext = _SwitchToPlaintext()


class TsiCipher:
    """One direction of a TSI channel: seals or opens records, chaining IVs."""

    def __init__(self, session_key: SessionKey, suite: CipherSuite):
        self.suite = suite
        self.key = session_key.key
        self.iv = session_key.iv

    def _encrypt(self, plaintext: bytes) -> bytes:
        padder = sympadding.PKCS7(self.suite.block_len * 8).padder()
        padded = padder.update(bytes(plaintext)) + padder.finalize()
        enc = self.suite.cipher(self.key, self.iv).encryptor()
        return enc.update(padded) + enc.finalize()

    def seal(self, plaintext: bytes) -> bytes:
        ciphertext = self._encrypt(plaintext)
        self.iv = ciphertext[-self.suite.block_len:]
        return (b"\x01\x01" + wire.encode_varuint(len(ciphertext))
                + self.suite.digest(plaintext) + ciphertext)

    def open_parts(self, digest: bytes, ciphertext: bytes) -> bytes:
        bl = self.suite.block_len
        if not ciphertext or len(ciphertext) % bl:
            raise IntegrityFailure(f"ciphertext length {len(ciphertext)} is not a block multiple")
        dec = self.suite.cipher(self.key, self.iv).decryptor()
        padded = dec.update(ciphertext) + dec.finalize()
        unpadder = sympadding.PKCS7(bl * 8).unpadder()
        try:
            plaintext = unpadder.update(padded) + unpadder.finalize()
        except ValueError:
            raise IntegrityFailure("bad padding") from None
        if not hmac.compare_digest(self.suite.digest(plaintext), digest):
            raise IntegrityFailure("plaintext hash mismatch")
        self.iv = ciphertext[-bl:]
        return plaintext

    def read_record(self, src: wire.ByteSource):
        """Read one record; returns plaintext bytes or :data:`SwitchToPlaintext`."""
        mode1, mode2 = src.recv_exact(2)
        if mode1 == 0 and mode2 == 0:
            return SwitchToPlaintext
        if mode1 != 1 or mode2 != 1:
            raise MalformedFrame(f"secured header modes {mode1}/{mode2}")
        length = wire.read_varuint(src)
        if length > MAX_RECORD + 64:
            raise MalformedFrame(f"secured record of {length} bytes")
        digest = src.recv_exact(self.suite.digest_len)
        return self.open_parts(digest, src.recv_exact(length))

    def open(self, data: bytes):
        reader = wire.ByteReader(data)
        try:
            result = self.read_record(reader)
        except TruncatedInput:
            raise MalformedFrame("truncated secured record") from None
        reader.expect_end()
        return result


def tsi_seal(plaintext: bytes, session_key: SessionKey, suite: CipherSuite) -> bytes:
    return TsiCipher(session_key, suite).seal(plaintext)


def tsi_open(data: bytes, session_key: SessionKey, suite: CipherSuite):
    return TsiCipher(session_key, suite).open(data)


# -- channel ----------------------------------------------------------------

class TsiChannel:
    """A socket wrapped in optional TSI framing, one state per direction.

    ``recv_exact`` and ``send`` are the only data-path calls; the upper
    protocol calls :meth:`begin_message` before reading each request so a
    re-arm escape from the peer is honored at a message boundary.  Sending
    and receiving may run in different threads.
    """

    POLL = 0.05

    def __init__(self, sock: socket.socket, *, io_timeout: float | None = None,
                 clock: Callable[[], float] = time.monotonic):
        self.sock = sock
        self.io_timeout = io_timeout
        self.clock = clock
        self.deadline: float | None = None
        self._rbuf = bytearray()
        self._send_cipher: TsiCipher | None = None
        self._recv_cipher: TsiCipher | None = None
        self.send_secure = False
        self.recv_secure = False
        self.suite: CipherSuite | None = None
        self.session_key: SessionKey | None = None
        self._send_lock = threading.Lock()
        self.bytes_sent = 0
        self.bytes_received = 0
        sock.settimeout(io_timeout)

    # raw socket access
    def fileno(self) -> int:
        return self.sock.fileno()

    def set_deadline(self, seconds: float | None) -> None:
        """Bound every following read by a wall deadline on ``clock``."""
        if seconds is None:
            self.deadline = None
            self.sock.settimeout(self.io_timeout)
        else:
            self.deadline = self.clock() + seconds
            self.sock.settimeout(self.POLL)

    def _raw_recv_into(self, view: memoryview) -> int:
        while True:
            try:
                n = self.sock.recv_into(view)
            except socket.timeout:
                if self.deadline is not None:
                    if self.clock() > self.deadline:
                        raise HandshakeTimeout("peer silent past deadline") from None
                    continue
                raise PeerReset("read timed out") from None
            except OSError as exc:
                raise PeerReset(f"connection error: {exc}") from None
            if n == 0:
                raise PeerReset("connection closed by peer")
            self.bytes_received += n
            return n

    def _raw_exact_into(self, view: memoryview) -> None:
        got = 0
        if self._rbuf and not self.recv_secure:
            take = min(len(self._rbuf), len(view))
            view[:take] = self._rbuf[:take]
            del self._rbuf[:take]
            got = take
        while got < len(view):
            got += self._raw_recv_into(view[got:])

    def _raw_exact(self, n: int) -> bytes:
        buf = bytearray(n)
        self._raw_exact_into(memoryview(buf))
        return bytes(buf)

    class _RawSource:
        def __init__(self, chan: "TsiChannel"):
            self.chan = chan

        def recv_exact(self, n: int) -> bytes:
            return self.chan._socket_exact(n)

    def _socket_exact(self, n: int) -> bytes:
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            got += self._raw_recv_into(view[got:])
        return bytes(buf)

    def _fill_secure(self) -> None:
        record = self._recv_cipher.read_record(self._RawSource(self))
        if record is SwitchToPlaintext:
            self.recv_secure = False
            log.debug("peer switched to plaintext")
        else:
            self._rbuf += record

    # data path
    def recv_exact(self, n: int) -> bytes:
        if n == 0:
            return b""
        while self.recv_secure and len(self._rbuf) < n:
            self._fill_secure()
        if len(self._rbuf) >= n:
            out = bytes(self._rbuf[:n])
            del self._rbuf[:n]
            return out
        return self._raw_exact(n)

    def recv_exact_into(self, view: memoryview) -> None:
        n = len(view)
        while self.recv_secure and len(self._rbuf) < n:
            self._fill_secure()
        if self.recv_secure or len(self._rbuf) >= n:
            view[:] = self._rbuf[:n]
            del self._rbuf[:n]
        else:
            self._raw_exact_into(view)

    def has_buffered(self) -> bool:
        return bool(self._rbuf)

    def begin_message(self) -> None:
        """Consume a re-arm escape if the peer sent one at this boundary."""
        if self.recv_secure or self._recv_cipher is None:
            return
        first = self.recv_exact(1)
        if first[0] != 0xFF:
            self._rbuf[:0] = first
            return
        second = self.recv_exact(1)
        if second[0] != 0xFF:
            raise MalformedFrame("incomplete TSI re-arm escape")
        self.recv_secure = True
        log.debug("peer re-armed TSI")

    def await_plaintext(self) -> None:
        """Block until the peer's switch marker arrives; nothing sealed may precede it."""
        if not self.recv_secure:
            return
        if self._rbuf:
            raise MalformedFrame("sealed data pending where a plaintext switch was expected")
        record = self._recv_cipher.read_record(self._RawSource(self))
        if record is not SwitchToPlaintext:
            raise MalformedFrame("expected a plaintext switch")
        self.recv_secure = False

    def send(self, data: bytes) -> None:
        with self._send_lock:
            try:
                if self.send_secure:
                    view = memoryview(data)
                    for start in range(0, max(len(view), 1), MAX_RECORD):
                        record = self._send_cipher.seal(view[start:start + MAX_RECORD])
                        self.sock.sendall(record)
                        self.bytes_sent += len(record)
                else:
                    self.sock.sendall(data)
                    self.bytes_sent += len(data)
            except OSError as exc:
                raise PeerReset(f"send failed: {exc}") from None

    def send_parts(self, *parts: bytes) -> None:
        if self.send_secure:
            self.send(b"".join(parts))
            return
        with self._send_lock:
            try:
                for part in parts:
                    self.sock.sendall(part)
                    self.bytes_sent += len(part)
            except OSError as exc:
                raise PeerReset(f"send failed: {exc}") from None

    # mode control
    def establish(self, session_key: SessionKey, suite: CipherSuite) -> None:
        self.session_key = session_key
        self.suite = suite
        self._send_cipher = TsiCipher(session_key, suite)
        self._recv_cipher = TsiCipher(session_key, suite)
        self.send_secure = True
        self.recv_secure = True

    def switch_to_plaintext(self) -> None:
        if not self.send_secure:
            return
        with self._send_lock:
            self.sock.sendall(SWITCH_MARKER)
            self.send_secure = False

    def rearm(self) -> None:
        if self.send_secure or self._send_cipher is None:
            return
        with self._send_lock:
            self.sock.sendall(REARM_MARKER)
            self.send_secure = True

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


# -- handshake halves -------------------------------------------------------

def client_secure(chan: TsiChannel, suite: CipherSuite = DEFAULT_SUITE,
                  rng: Callable[[int], bytes] = os.urandom) -> SessionKey:
    header = RsaPublicHeader.read(chan)
    shared, session_key = client_key_exchange(header, suite, rng)
    chan.send(shared.encode())
    verdict = chan.recv_exact(1)[0]
    if verdict == CSP_UNSUPPORTED:
        raise UnsupportedSuite(f"server rejected suite {suite.name}")
    if verdict != CSP_ACCEPT:
        raise VerificationFailed(f"server rejected key exchange ({verdict})")
    chan.establish(session_key, suite)
    return session_key


def server_secure(chan: TsiChannel, keypair: rsa.RSAPrivateKey,
                  allowed: tuple[CipherSuite, ...] | None = None,
                  hello: RsaPublicHeader | None = None) -> SessionKey:
    chan.send((hello or server_hello(keypair)).encode())
    shared = SharedKeyHeader.read(chan)
    try:
        session_key = server_verify(shared, keypair, allowed)
    except UnsupportedSuite:
        chan.send(bytes((CSP_UNSUPPORTED,)))
        raise
    except (VerificationFailed, DecryptFailed):
        chan.send(bytes((CSP_VERIFY_FAILED,)))
        raise
    chan.send(bytes((CSP_ACCEPT,)))
    chan.establish(session_key, suite_of(shared))
    return session_key


# -- credentials ------------------------------------------------------------

@dataclass(frozen=True)
class Credential:
    username: str
    password: str

    def __post_init__(self):
        if not self.username:
            raise ValueError("username must not be empty")

    def encode(self) -> bytes:
        return wire.encode_str(self.username) + wire.encode_str(self.password)

    @classmethod
    def read(cls, src: wire.ByteSource) -> "Credential":
        username = wire.read_str(src)
        password = wire.read_str(src)
        if not username:
            raise MalformedFrame("empty username")
        return cls(username, password)


@dataclass(frozen=True)
class Principal:
    username: str
    permissions: frozenset = frozenset({"r", "w"})

    @property
    def can_write(self) -> bool:
        return "w" in self.permissions

    @property
    def can_read(self) -> bool:
        return "r" in self.permissions

    def require(self, perm: str, what: str = "") -> None:
        if perm not in self.permissions:
            raise AccessDenied(f"{self.username} lacks '{perm}' permission{' for ' + what if what else ''}")


def hash_password(salt: bytes, password: str) -> bytes:
    return hashlib.sha256(salt + password.encode("utf-8")).digest()


@dataclass
class _Entry:
    salt: bytes
    digest: bytes
    permissions: frozenset


@dataclass
class CredentialStore:
    """``username : salt-hex : sha256-hex [: perms]`` lines.

    ``perms`` is a subset of ``rw`` and defaults to ``rw``.  Lines starting
    with ``#`` are comments.
    """

    path: Path | None = None
    _entries: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    _DUMMY = _Entry(b"\x00" * 16, b"\x00" * 32, frozenset())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CredentialStore":
        store = cls(Path(path))
        store.reload()
        return store

    def reload(self) -> None:
        if self.path is None:
            return
        entries = {}
        for lineno, line in enumerate(self.path.read_text("utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(":")]
            if len(parts) not in (3, 4) or not parts[0]:
                raise ValueError(f"{self.path}:{lineno}: malformed credential line")
            perms = frozenset(parts[3]) if len(parts) == 4 else frozenset("rw")
            entries[parts[0]] = _Entry(bytes.fromhex(parts[1]), bytes.fromhex(parts[2]), perms)
        with self._lock:
            self._entries = entries
        log.info("loaded %d credentials from %s", len(entries), self.path)

    def add_user(self, username: str, password: str, permissions: str = "rw") -> None:
        salt = os.urandom(16)
        with self._lock:
            self._entries[username] = _Entry(salt, hash_password(salt, password), frozenset(permissions))

    def save(self, path: str | os.PathLike | None = None) -> None:
        target = Path(path) if path else self.path
        if target is None:
            raise ValueError("no credential file path")
        with self._lock:
            lines = [f"{u} : {e.salt.hex()} : {e.digest.hex()} : {''.join(sorted(e.permissions))}"
                     for u, e in sorted(self._entries.items())]
        target.write_text("\n".join(lines) + "\n", "utf-8")
        self.path = target

    def lookup(self, username: str) -> _Entry | None:
        with self._lock:
            return self._entries.get(username)

    def __len__(self):
        return len(self._entries)


def authenticate(credential: Credential, store: CredentialStore) -> Principal:
    entry = store.lookup(credential.username)
    # unknown users run the same hash and comparison as wrong passwords
    candidate = entry or CredentialStore._DUMMY
    ok = hmac.compare_digest(hash_password(candidate.salt, credential.password), candidate.digest)
    if entry is None or not ok:
        raise AuthFailed("authentication failed")
    return Principal(credential.username, entry.permissions)
