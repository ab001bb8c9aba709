import json
import os

import pytest

from dotdfs.dirtree import (
    ChannelStats,
    PassThrough,
    download_tree,
    plan_remote_tree,
    plan_tree,
    tree_diff,
    upload_tree,
)
from dotdfs.errors import CycleDetected, IoError, PartialFailure
from dotdfs.harness import TreeSpec, gen_tree
from dotdfs.pathm import PathClient

K = 1024


def test_empty_directory_plan(tmp_path):
    plan = plan_tree(tmp_path)
    assert plan.directories == [""] and plan.file_count == 0


def test_corpus_shape_all_small(tmp_path):
    manifest = gen_tree(tmp_path, TreeSpec())
    plan = plan_tree(tmp_path)
    assert len(plan.small_files) == 1000 and plan.large_files == []
    assert len(plan.directories) == 101
    assert plan.total_bytes == sum(size for size, _ in manifest.values())


def test_one_large_file_alone_in_lfq(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "small").write_bytes(b"s" * 100)
    (tmp_path / "big").write_bytes(b"\0" * (10 * 1024 * K))
    plan = plan_tree(tmp_path)
    assert [f.rel for f in plan.large_files] == ["big"]
    assert [f.rel for f in plan.small_files] == ["a/small"]


def test_order_parents_first(tmp_path):
    for d in ("b/c", "a/z/y", "a/b"):
        (tmp_path / d).mkdir(parents=True)
    dirs = plan_tree(tmp_path).directories
    assert dirs == ["", "a", "a/b", "a/z", "a/z/y", "b", "b/c"]


def test_symlink_cycle_detected(tmp_path):
    (tmp_path / "d").mkdir()
    os.symlink(tmp_path, tmp_path / "d" / "loop")
    with pytest.raises(CycleDetected):
        plan_tree(tmp_path)


def test_not_a_directory(tmp_path):
    (tmp_path / "f").write_bytes(b"")
    with pytest.raises(IoError):
        plan_tree(tmp_path / "f")


def _mixed_tree(root, small=120, large=3, large_size=2 * 1024 * K):
    (root / "s").mkdir(parents=True)
    for i in range(small):
        (root / "s" / f"f{i:03d}").write_bytes(os.urandom(2 * K))
    for i in range(large):
        (root / f"L{i}").write_bytes(os.urandom(large_size))


def test_only_small_files_leave_ftsm_idle(loopback, tmp_path):
    src = tmp_path / "src"
    gen_tree(src, TreeSpec(files=60, dirs=5, max_size=8 * K, seed=1))
    report = upload_tree(loopback.endpoint, loopback.security, src, "/t", m=4, n=4)
    assert report.peaks["ftsm_streams"] == 0 and report.peaks["pathm"] <= 4
    assert tree_diff(src, loopback.path("t")) == []
    assert {f.channel for f in report.files} <= {f"pathm-{i}" for i in range(1, 5)}


def test_mixed_tree_channel_accounting(loopback, tmp_path):
    src = tmp_path / "src"
    _mixed_tree(src)
    seen = []
    report = upload_tree(loopback.endpoint, loopback.security, src, "/mix", m=2, n=3,
                         threshold=64 * K, stats_hook=lambda s: seen.append(s.peaks()))
    assert tree_diff(src, loopback.path("mix")) == []
    assert report.peaks["pathm"] <= 2 and report.peaks["ftsm_streams"] <= 3
    ftsm = [f for f in report.files if f.channel == "ftsm"]
    assert sorted(f.path for f in ftsm) == ["L0", "L1", "L2"]
    assert len(report.files) == 123 and seen


def test_m_plus_one_files_in_flight(tmp_path):
    from dotdfs.harness import spawn_loopback

    src = tmp_path / "src"
    _mixed_tree(src, small=300, large=3, large_size=4 * 1024 * K)
    with spawn_loopback(fsync=True) as fx:
        report = upload_tree(fx.endpoint, fx.security, src, "/f", m=3, n=2, threshold=64 * K)
    assert report.peaks["files_in_flight"] >= 4


def test_round_trip_download(loopback, tmp_path):
    src = tmp_path / "src"
    _mixed_tree(src, small=20, large=2, large_size=300 * K)
    upload_tree(loopback.endpoint, loopback.security, src, "/rt", m=2, n=2, threshold=64 * K)
    back = tmp_path / "back"
    report = download_tree(loopback.endpoint, loopback.security, "/rt", back, m=3, n=2, threshold=64 * K)
    assert tree_diff(src, back) == [] and report.direction == "download"


def test_remote_plan(loopback, tmp_path):
    src = tmp_path / "src"
    _mixed_tree(src, small=3, large=1, large_size=100 * K)
    upload_tree(loopback.endpoint, loopback.security, src, "/p", m=1, n=1, threshold=64 * K)
    with PathClient.connect(loopback.endpoint, loopback.security) as pc:
        plan = plan_remote_tree(pc, "/p", threshold=64 * K)
    local = plan_tree(src, threshold=64 * K)
    assert plan.directories == local.directories
    assert plan.files == local.files


class FailOn(PassThrough):
    def encode(self, data):
        if data.startswith(b"FAIL"):
            raise IoError("filter refused")
        return data


def test_failed_file_is_isolated_and_reported(loopback, tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    for i in range(10):
        (src / f"ok{i}").write_bytes(b"fine %d" % i)
    (src / "bad").write_bytes(b"FAIL me")
    manifest = tmp_path / "manifest.jsonl"
    with pytest.raises(PartialFailure) as info:
        upload_tree(loopback.endpoint, loopback.security, src, "/iso", m=2, n=1,
                    content_filter=FailOn(), manifest=manifest)
    report = info.value.report
    assert [f.path for f in report.failed] == ["bad"]
    assert len(list(loopback.path("iso").iterdir())) == 10
    rows = [json.loads(line) for line in manifest.read_text().splitlines()]
    assert len(rows) == 11 and {"path", "bytes", "status", "ms"} <= rows[0].keys()
    assert [r["path"] for r in rows if r["status"] != "ok"] == ["bad"]


def test_invalid_m(loopback, tmp_path):
    with pytest.raises(ValueError):
        upload_tree(loopback.endpoint, loopback.security, tmp_path, "/x", m=0)


def test_channel_stats_peaks():
    s = ChannelStats()
    s.adjust("pathm_open", 3)
    s.adjust("pathm_open", -2)
    s.adjust("in_flight", 2)
    assert s.peaks() == {"pathm": 3, "ftsm_streams": 0, "files_in_flight": 2}


def test_tree_diff_detects_changes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for root in (a, b):
        (root / "d").mkdir(parents=True)
        (root / "d" / "f").write_bytes(b"x")
    assert tree_diff(a, b) == []
    (b / "d" / "f").write_bytes(b"y")
    (b / "extra").mkdir()
    assert tree_diff(a, b) == ["d/f", "extra"]
