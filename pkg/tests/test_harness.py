import random

import pytest

from dotdfs import wire
from dotdfs.client import FtsmSession
from dotdfs.errors import TransferAborted
from dotdfs.harness import (
    FakeClock,
    FaultPlan,
    ThroughputRecorder,
    TreeSpec,
    gen_tree,
    mutate,
    random_frame,
    random_varuint,
    spawn_loopback,
    write_random_file,
)
from dotdfs.pathm import PathClient
from dotdfs.wanmodel import load_samples


def test_default_fixture_handshakes(loopback):
    with PathClient.connect(loopback.endpoint, loopback.security) as pc:
        assert pc.exists("/")


def test_two_fixtures_are_independent():
    with spawn_loopback() as a, spawn_loopback() as b:
        assert a.root != b.root and a.endpoint != b.endpoint
        with PathClient.connect(a.endpoint, a.security) as pc:
            pc.put_bytes("/only-a", b"1")
        assert a.path("only-a").exists() and not b.path("only-a").exists()


def test_fixture_cleans_up():
    with spawn_loopback() as fx:
        root = fx.root
        server = fx.server
    assert not root.exists()
    assert server.active_threads() == 0


def test_reset_stream_two_at_frame_ten(loopback, tmp_file):
    src, _ = tmp_file(1 << 20)
    with pytest.raises(TransferAborted):
        with FtsmSession(loopback.endpoint, loopback.security, n=4, block=16 * 1024,
                         frame_hook=FaultPlan("reset", stream=2, frame=10)) as s:
            s.upload(src, "/r")


@pytest.mark.parametrize("action", ["truncate", "flip"])
def test_corrupting_faults_abort(loopback, tmp_file, action):
    src, _ = tmp_file(1 << 20)
    with pytest.raises(TransferAborted):
        with FtsmSession(loopback.endpoint, loopback.security, n=2, block=16 * 1024,
                         frame_hook=FaultPlan(action, stream=0, frame=3)) as s:
            s.upload(src, "/c")


def test_delay_fault_is_harmless(loopback, tmp_file):
    src, digest = tmp_file(100 * 1024)
    with FtsmSession(loopback.endpoint, loopback.security, n=2, block=16 * 1024,
                     frame_hook=FaultPlan("delay", stream=None, frame=1, delay_ms=20)) as s:
        s.upload(src, "/d")
    import hashlib

    assert hashlib.sha256(loopback.path("d").read_bytes()).hexdigest() == digest


def test_fault_plan_seeded():
    assert FaultPlan.random(5, 4, 100) == FaultPlan.random(5, 4, 100)
    with pytest.raises(ValueError):
        FaultPlan("explode")


def test_fake_clock():
    c = FakeClock(10)
    c.advance(2.5)
    assert c() == 12.5


def test_fuzzers_deterministic():
    a, b = random.Random(1), random.Random(1)
    assert [random_varuint(a) for _ in range(50)] == [random_varuint(b) for _ in range(50)]
    f = random_frame(random.Random(2))
    assert wire.decode_frame(wire.encode_frame(f))[0] == f
    data = b"\x00" * 8
    flipped = mutate(data, random.Random(3))
    assert sum(bin(x).count("1") for x in flipped) == 1


def test_gen_tree_corpus_and_determinism(tmp_path):
    m1 = gen_tree(tmp_path / "a", TreeSpec())
    m2 = gen_tree(tmp_path / "b", TreeSpec())
    assert m1 == m2 and len(m1) == 1000
    total = sum(size for size, _ in m1.values())
    assert 60e6 <= total <= 100e6
    assert all(1024 <= size <= 512 * 1024 for size, _ in m1.values())
    dirs = [p for p in (tmp_path / "a").rglob("*") if p.is_dir()]
    assert len(dirs) == 100


def test_gen_tree_empty(tmp_path):
    assert gen_tree(tmp_path, TreeSpec(files=0, dirs=5)) == {}
    assert len([p for p in tmp_path.rglob("*") if p.is_dir()]) == 5


def test_write_random_file(tmp_path):
    import hashlib

    digest = write_random_file(tmp_path / "f", 12345, seed=4, chunk=1000)
    assert hashlib.sha256((tmp_path / "f").read_bytes()).hexdigest() == digest
    assert write_random_file(tmp_path / "g", 12345, seed=4) == digest


def test_recorder_csv(tmp_path, loopback):
    rec = ThroughputRecorder()
    with FtsmSession(loopback.endpoint, loopback.security, n=2) as s:
        rec.record_report(s.upload_memory(1 << 20))
    rec.record(4, 65536, 1e6)
    rec.to_csv(tmp_path / "s.csv")
    samples = load_samples(tmp_path / "s.csv")
    assert len(samples) == 2 and samples[0].n == 2 and samples[1].bw == 1e6
