import hashlib
import os
import random

import pytest

from dotdfs.errors import (
    AlreadyExists,
    DirectoryNotEmpty,
    NotFound,
    PathOutsideRoot,
    TooLarge,
)
from dotdfs.pathm import (
    DirEntry,
    Kind,
    Op,
    PathClient,
    PathOp,
    PathReply,
    decode_listing,
    encode_listing,
)
from dotdfs.paths import FsRoot


@pytest.fixture
def pc(loopback):
    with PathClient.connect(loopback.endpoint, loopback.security) as client:
        yield client


def test_mkdir_then_exists(pc, loopback):
    pc.mkdir("a/b/c")
    assert pc.exists("a/b/c") and pc.kind("a/b/c") == Kind.DIRECTORY
    assert loopback.path("a/b/c").is_dir()


def test_missing_delete_keeps_channel(pc):
    with pytest.raises(NotFound):
        pc.delete_file("nope")
    pc.mkdir("still-works")
    assert pc.kind("still-works") == Kind.DIRECTORY


def test_rename_escape_rejected(pc, loopback):
    pc.put_bytes("/f", b"x")
    with pytest.raises(PathOutsideRoot):
        pc.rename("/f", "../x")
    pc.rename("/f", "/g")
    assert loopback.path("g").read_bytes() == b"x"
    pc.put_bytes("/h", b"")
    with pytest.raises(AlreadyExists):
        pc.rename("/g", "/h")


def test_rmdir_semantics(pc, loopback):
    pc.mkdir("d")
    pc.put_bytes("d/f", b"1")
    with pytest.raises(DirectoryNotEmpty):
        pc.rmdir("d")
    pc.delete_file("d/f")
    pc.rmdir("d")
    assert not loopback.path("d").exists()


def test_listing_and_size(pc, loopback):
    pc.mkdir("l/sub")
    pc.put_bytes("l/a.txt", b"abc")
    entries = pc.listdir("l")
    assert entries == [DirEntry("a.txt", Kind.FILE, 3), DirEntry("sub", Kind.DIRECTORY, 0)]
    assert pc.size("l/a.txt") == 3
    with pytest.raises(NotFound):
        pc.listdir("missing")


def test_listing_codec_roundtrip():
    entries = [DirEntry("ä", Kind.FILE, 2 ** 40), DirEntry("d", Kind.DIRECTORY, 0)]
    assert decode_listing(encode_listing(entries)) == entries


def test_small_file_one_kib(pc, loopback, tmp_file):
    src, digest = tmp_file(1024)
    pc.upload_small_file(src, "/one")
    assert hashlib.sha256(loopback.path("one").read_bytes()).hexdigest() == digest
    assert pc.checksum("/one").hex() == digest


def test_zero_byte_file(pc, loopback, tmp_path):
    src = tmp_path / "z"
    src.write_bytes(b"")
    pc.upload_small_file(src, "/z")
    assert loopback.path("z").stat().st_size == 0
    pc.download_small_file("/z", tmp_path / "z2")
    assert (tmp_path / "z2").read_bytes() == b""


def test_threshold_plus_one_refused_before_sending(pc, tmp_path, loopback):
    src = tmp_path / "big"
    src.write_bytes(b"\0" * (pc.threshold + 1))
    sent = pc.chan.bytes_sent
    with pytest.raises(TooLarge):
        pc.upload_small_file(src, "/big")
    assert pc.chan.bytes_sent == sent
    # exactly at the threshold is accepted
    pc.put_bytes("/edge", b"\1" * pc.threshold)
    assert loopback.path("edge").stat().st_size == pc.threshold


def test_server_enforces_threshold_too(pc):
    pc.threshold = 10 ** 9  # bypass the client check
    with pytest.raises(TooLarge):
        pc.put_bytes("/big", b"\0" * (1024 * 1024 + 1))
    assert pc.exists("/") is True


def test_round_trips_500_small_files(pc, tmp_path):
    rng = random.Random(5)
    for i in range(500):
        data = rng.randbytes(rng.randint(0, 4096))
        pc.put_bytes(f"/s{i}", data)
        assert pc.get_bytes(f"/s{i}") == data


def test_pipeline_1000_ops_in_order(pc):
    ops = [PathOp.make(Op.UPLOAD_SMALL_FILE, f"/p{i}", str(i)) for i in range(500)]
    ops += [PathOp.make(Op.DOWNLOAD_SMALL_FILE, f"/p{i}") for i in range(500)]
    replies = pc.pipeline(ops)
    assert len(replies) == 1000 and all(r.ok for r in replies)
    assert [r.payload for r in replies[500:]] == [str(i).encode() for i in range(500)]


def test_unknown_opcode_gets_reply(pc):
    reply = pc.execute(PathOp(99))
    assert not reply.ok


def test_confinement_fuzz(loopback, pc, tmp_path):
    outside = tmp_path / "outside"
    outside.mkdir()
    os.symlink(outside, loopback.path("link"))
    rng = random.Random(9)
    parts = ["..", ".", "a", "link", "", "..\\..", "%2e%2e"]
    escapes = 0
    for _ in range(500):
        path = "/".join(rng.choice(parts) for _ in range(rng.randint(1, 6)))
        reply = pc.execute(PathOp.make(Op.UPLOAD_SMALL_FILE, path + "/x", b"!"))
        if reply.ok:
            resolved = os.path.realpath(loopback.path(path + "/x"))
            escapes += not resolved.startswith(str(loopback.root))
    assert escapes == 0
    assert list(outside.iterdir()) == []


def test_fsroot_resolve_property(tmp_path):
    root = FsRoot(tmp_path)
    assert root.resolve("/a/../b") == tmp_path.resolve() / "b"
    for bad in ("../x", "/../../etc", "a/../../x", "a\x00b"):
        with pytest.raises(PathOutsideRoot):
            root.resolve(bad)


def test_reply_codec():
    r = PathReply(0, b"payload")
    assert r.ok and r.message == ""
    assert PathReply(3, b"missing").message == "missing"
