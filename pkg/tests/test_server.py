import hashlib
import socket
import threading
import time

import pytest

from conftest import wait_until
from dotdfs import dotsec, wire
from dotdfs.cfsm import State
from dotdfs.client import FtsmSession
from dotdfs.connection import open_channel
from dotdfs.errors import (
    BindFailed,
    ConfigError,
    DuplicateStream,
    NotFound,
    ParamMismatch,
    PoolFull,
    TransferAborted,
)
from dotdfs.harness import FakeClock, FaultPlan, misbehaving_handshake, spawn_loopback
from dotdfs.server import DotDfsServer, ServerConfig, SessionEntry, SessionPool
from dotdfs.wire import Direction, Mode, SessionParams

K = 1024


def _params(guid=b"g" * 16, n=4, path="/f"):
    return SessionParams(guid, n, 0, Direction.UPLOAD, path, 0, 0, wire.DEFAULT_BLOCK)


def _entry(params):
    return lambda: SessionEntry(params.guid, params, None, 0, None, 0, None)


class TestPool:
    def test_first_then_joiners_then_duplicate(self):
        pool = SessionPool()
        p = _params()
        entry, created = pool.reserve(p, _entry(p))
        assert created and p.guid in pool and len(pool) == 1
        for _ in range(3):
            again, created = pool.reserve(p, _entry(p))
            assert again is entry and not created
        with pytest.raises(DuplicateStream):
            pool.reserve(p, _entry(p))

    def test_mismatched_params_rejected(self):
        pool = SessionPool()
        p = _params()
        pool.reserve(p, _entry(p))
        other = _params(path="/other")
        with pytest.raises(ParamMismatch):
            pool.reserve(other, _entry(other))

    def test_cap(self):
        pool = SessionPool(cap=2)
        for i in range(2):
            p = _params(guid=bytes([i]) * 16)
            pool.reserve(p, _entry(p))
        p = _params(guid=b"z" * 16)
        with pytest.raises(PoolFull):
            pool.reserve(p, _entry(p))

    def test_unreserve_and_remove(self):
        pool = SessionPool()
        p = _params(n=2)
        entry, _ = pool.reserve(p, _entry(p))
        pool.reserve(p, _entry(p))
        pool.unreserve(entry)
        pool.reserve(p, _entry(p))  # the freed slot can be taken again
        pool.remove(p.guid)
        assert pool.get(p.guid) is None and len(pool) == 0


def test_config_file(tmp_path):
    cfg = tmp_path / "server.conf"
    cfg.write_text("# comment\nport = 3000\nroot=/srv\nwlm_timeout = 5.5\nfsync = yes\n")
    c = ServerConfig.from_file(cfg, host="127.0.0.1")
    assert (c.port, c.root, c.wlm_timeout, c.fsync, c.host) == (3000, "/srv", 5.5, True, "127.0.0.1")
    cfg.write_text("bogus = 1\n")
    with pytest.raises(ConfigError):
        ServerConfig.from_file(cfg)
    cfg.write_text("port = eighty\n")
    with pytest.raises(ConfigError):
        ServerConfig.from_file(cfg)


def test_bind_failure(loopback):
    host, port = loopback.server.address
    server = DotDfsServer(ServerConfig(root=str(loopback.root), host=host, port=port),
                          keypair=loopback.server.keypair, credentials=loopback.credentials)
    with pytest.raises(BindFailed):
        server.start()


@pytest.mark.parametrize("byte", [1, 2, 5])
def test_other_service_bytes_rejected_politely(loopback, byte):
    sock = socket.create_connection(loopback.server.address, timeout=5)
    sock.sendall(bytes([byte]))
    data = b""
    while chunk := sock.recv(4096):
        data += chunk
    sock.close()
    assert data[0] == wire.ERROR_OPCODE and len(data) > 2


def test_handshake_timeout_on_fake_clock():
    clock = FakeClock()
    with spawn_loopback(clock=clock, handshake_timeout=30) as fx:
        out = {}
        t = threading.Thread(target=lambda: out.setdefault(
            "got", misbehaving_handshake(fx.endpoint, "silent", hold=1.5)))
        t.start()
        assert wait_until(lambda: len(fx.server.stream_traces) == 1)
        time.sleep(0.2)
        assert fx.server.stream_traces[0].state is not State.ERROR
        clock.advance(31)
        assert wait_until(lambda: fx.server.stream_traces[0].state is State.ERROR)
        t.join()
        # the server sent its availability byte and then its key header before giving up
        assert out["got"][:1] == b"\x00"


def test_garbage_handshake_does_not_disturb_server(loopback, tmp_file):
    import random

    for seed in range(5):
        misbehaving_handshake(loopback.endpoint, "garbage", random.Random(seed))
    misbehaving_handshake(loopback.endpoint, "reset")
    src, digest = tmp_file(10 * K)
    with FtsmSession(loopback.endpoint, loopback.security, n=2) as s:
        s.upload(src, "/ok")
    assert hashlib.sha256(loopback.path("ok").read_bytes()).hexdigest() == digest


def test_wlm_times_out_on_fake_clock():
    clock = FakeClock()
    with spawn_loopback(clock=clock, wlm_timeout=60) as fx:
        chan = open_channel(fx.endpoint, fx.security, Mode.FTSM)
        params = SessionParams(wire.new_guid(), 3, 0, Direction.UPLOAD, "/x", 0, 0, wire.DEFAULT_BLOCK)
        chan.send(params.encode())
        chan.begin_message()
        wire.read_params_ack(chan)
        chan.switch_to_plaintext()
        assert wait_until(lambda: params.guid in fx.server.pool)
        entry = fx.server.pool.get(params.guid)
        assert wait_until(lambda: entry.current_received_streams == 1)
        time.sleep(0.2)
        assert params.guid in fx.server.pool
        clock.advance(61)
        assert wait_until(lambda: params.guid not in fx.server.pool)
        assert wait_until(lambda: fx.server.stats.sessions_failed == 1)
        assert fx.server.session_traces[0].state is State.ERROR
        chan.close()


def test_wlm_counts_streams_then_starts_pioe(loopback):
    guid = wire.new_guid()
    params = SessionParams(guid, 4, 0, Direction.UPLOAD, "/w", 0, 0, 1024)
    chans = []
    for i in range(4):
        chan = open_channel(loopback.endpoint, loopback.security, Mode.FTSM)
        chan.send(params.encode())
        chan.begin_message()
        wire.read_params_ack(chan)
        chan.switch_to_plaintext()
        chans.append(chan)
        entry = loopback.server.pool.get(guid)
        if i < 3:
            assert wait_until(lambda: entry.current_received_streams == i + 1)
    assert wait_until(lambda: State.PIOE_START in loopback.server.session_traces[0].log)
    # a fifth stream is refused
    extra = open_channel(loopback.endpoint, loopback.security, Mode.FTSM)
    extra.send(params.encode())
    extra.begin_message()
    with pytest.raises(DuplicateStream):
        wire.read_params_ack(extra)
    extra.close()
    for chan in chans:
        chan.send(wire.SENTINEL)
    for chan in chans:
        chan.begin_message()
        assert wire.read_status(chan)[0] == 0
    chans[0].send(b"\x00")
    for chan in chans:
        chan.close()
    assert loopback.path("w").read_bytes() == b""


def test_missing_download_reports_not_found(loopback):
    with pytest.raises(NotFound):
        with FtsmSession(loopback.endpoint, loopback.security, n=2) as s:
            s.download("/nope", "/tmp/never-written")
    assert wait_until(lambda: len(loopback.server.pool) == 0)


def test_upload_reset_keeps_part_and_clears_pool(loopback, tmp_file):
    src, _ = tmp_file(2 * 1024 * K)
    plan = FaultPlan("reset", stream=1, frame=5)
    with pytest.raises(TransferAborted):
        with FtsmSession(loopback.endpoint, loopback.security, n=4, block=32 * K, frame_hook=plan) as s:
            s.upload(src, "/big.bin")
    assert wait_until(lambda: loopback.server.stats.sessions_failed == 1)
    assert len(loopback.server.pool) == 0
    assert loopback.path("big.bin.part").exists()
    assert not loopback.path("big.bin").exists()
    assert loopback.server.session_traces[-1].state is State.ERROR


def test_download_reset_on_server_side_aborts_client(tmp_path):
    plan = FaultPlan("reset", stream=None, frame=3)
    with spawn_loopback(send_hook=plan) as fx:
        fx.path("src.bin").write_bytes(bytes(1024 * K))
        dest = tmp_path / "out.bin"
        with pytest.raises(TransferAborted):
            with FtsmSession(fx.endpoint, fx.security, n=2, block=64 * K) as s:
                s.download("/src.bin", dest)
        assert (tmp_path / "out.bin.part").exists() and not dest.exists()


def test_download_frame_counts(loopback):
    loopback.path("m.bin").write_bytes(bytes(range(256)) * 4096)  # 1 MiB
    frames = []
    with FtsmSession(loopback.endpoint, loopback.security, n=2, block=256 * K,
                     frame_hook=lambda i, k, ch: frames.append(i)) as s:
        span = s.negotiate(Direction.DOWNLOAD, "/m.bin")
        from dotdfs.blockio import CoalescingWriter, NullSink

        got = s.receive(CoalescingWriter(NullSink(), verify_overlap=False), span, (0, span))
    assert len(frames) == 4 and sum(got) == 1024 * K


def test_partial_download_range(loopback, tmp_path):
    data = bytes(range(256))
    loopback.path("r.bin").write_bytes(data)
    dest = tmp_path / "r.out"
    with FtsmSession(loopback.endpoint, loopback.security, n=1) as s:
        report = s.download("/r.bin", dest, offset=100, length=50)
    assert report.bytes_moved == 50
    assert dest.read_bytes() == bytes(100) + data[100:150]


def test_empty_download_is_sentinel_only(loopback, tmp_path):
    loopback.path("e").write_bytes(b"")
    frames = []
    with FtsmSession(loopback.endpoint, loopback.security, n=3,
                     frame_hook=lambda *a: frames.append(a)) as s:
        s.download("/e", tmp_path / "e")
    assert frames == [] and (tmp_path / "e").read_bytes() == b""


def test_one_manager_per_session(loopback, tmp_file):
    src, _ = tmp_file(4 * 1024 * K)
    with FtsmSession(loopback.endpoint, loopback.security, n=16) as s:
        s.upload(src, "/a")
    buf = loopback.server.stats.session_buffers
    assert wait_until(lambda: len(buf) == 1)
    assert loopback.server.stats.managers_peak == 1
    assert next(iter(buf.values())) <= 1024 * K + wire.DEFAULT_BLOCK


def test_semi_secure_and_encrypted_transfers_match(loopback, tmp_file):
    src, digest = tmp_file(300 * K)
    for protection in (wire.Protection.SEMI_SECURE, wire.Protection.ENCRYPTED):
        sec = loopback.security_for(protection=protection)
        with FtsmSession(loopback.endpoint, sec, n=3, block=16 * K) as s:
            s.upload(src, f"/p{int(protection)}")
        got = loopback.path(f"p{int(protection)}").read_bytes()
        assert hashlib.sha256(got).hexdigest() == digest


def test_bad_password_rejected(loopback):
    from dotdfs.errors import AuthFailed

    bad = loopback.security_for(credential=dotsec.Credential("tester", "wrong"))
    with pytest.raises(AuthFailed):
        open_channel(loopback.endpoint, bad, Mode.PATHM)


def test_stop_drains_threads(tmp_file):
    with spawn_loopback() as fx:
        src, _ = tmp_file(100 * K)
        with FtsmSession(fx.endpoint, fx.security, n=2) as s:
            s.upload(src, "/s")
        server = fx.server
    assert wait_until(lambda: server.active_threads() == 0)
