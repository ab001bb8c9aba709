"""Recursive directory-tree transfer over m PathM channels plus one FTSM session.

A local traversal produces a :class:`TreePlan`: the directory skeleton
(parents first) and two file queues split by size.  Small files travel as
single PathM requests, one per channel at a time; large files go through
one FTSM session with ``n`` streams, reused from file to file.  The first
PathM channel builds the remote skeleton, then joins the small-file
workers.  A failed file is recorded and the rest continue.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import stat
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

from . import wire
from .client import FtsmSession
from .connection import Endpoint, Security
from .errors import CycleDetected, DotDfsError, IoError, PartialFailure
from .pathm import SMALL_FILE_THRESHOLD, Kind, PathClient, PathOp, Op

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FileItem:
    rel: str  # posix-style, relative to the tree root
    size: int


@dataclass
class TreePlan:
    root: Path
    directories: list[str] = field(default_factory=list)  # "" is the root itself
    small_files: list[FileItem] = field(default_factory=list)
    large_files: list[FileItem] = field(default_factory=list)
    threshold: int = SMALL_FILE_THRESHOLD

    @property
    def files(self) -> list[FileItem]:
        return sorted(self.small_files + self.large_files, key=lambda f: f.rel)

    @property
    def file_count(self) -> int:
        return len(self.small_files) + len(self.large_files)

    @property
    def total_bytes(self) -> int:
        return sum(f.size for f in self.small_files) + sum(f.size for f in self.large_files)

    def totals(self) -> dict:
        return {
            "directories": len(self.directories),
            "files": self.file_count,
            "small_files": len(self.small_files),
            "large_files": len(self.large_files),
            "small_bytes": sum(f.size for f in self.small_files),
            "large_bytes": sum(f.size for f in self.large_files),
            "bytes": self.total_bytes,
        }


def plan_tree(local_root: str | os.PathLike, threshold: int = SMALL_FILE_THRESHOLD) -> TreePlan:
    """Walk ``local_root`` in lexicographic pre-order, following symlinks.

    A symlink leading back to one of its own ancestors raises CycleDetected.
    """
    root = Path(local_root)
    if not root.is_dir():
        raise IoError(f"{root} is not a directory")
    plan = TreePlan(root, threshold=threshold)

    def walk(path: Path, rel: str, ancestors: frozenset) -> None:
        st = path.stat()
        ident = (st.st_dev, st.st_ino)
        if ident in ancestors:
            raise CycleDetected(f"symlink cycle at {path}")
        ancestors = ancestors | {ident}
        plan.directories.append(rel)
        try:
            names = sorted(os.listdir(path))
        except OSError as exc:
            raise IoError(f"cannot list {path}: {exc}") from exc
        subdirs = []
        for name in names:
            child = path / name
            child_rel = f"{rel}/{name}" if rel else name
            try:
                cst = child.stat()
            except OSError as exc:
                raise IoError(f"cannot stat {child}: {exc}") from exc
            if stat.S_ISDIR(cst.st_mode):
                subdirs.append((child, child_rel))
            elif stat.S_ISREG(cst.st_mode):
                item = FileItem(child_rel, cst.st_size)
                (plan.small_files if cst.st_size <= threshold else plan.large_files).append(item)
        for child, child_rel in subdirs:
            walk(child, child_rel, ancestors)

    walk(root, "", frozenset())
    return plan


class ContentFilter(Protocol):
    """Transforms small-file content on the way out (e.g. compression)."""

    def encode(self, data: bytes) -> bytes: ...

    def decode(self, data: bytes) -> bytes: ...


class PassThrough:
    def encode(self, data: bytes) -> bytes:
        return data

    def decode(self, data: bytes) -> bytes:
        return data


@dataclass
class FileResult:
    path: str
    bytes: int
    status: str
    ms: float
    channel: str
    error: str | None = None


@dataclass
class ChannelStats:
    """Live channel and in-flight file accounting with peaks."""

    pathm_open: int = 0
    pathm_peak: int = 0
    ftsm_streams_open: int = 0
    ftsm_streams_peak: int = 0
    in_flight: int = 0
    in_flight_peak: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def adjust(self, name: str, delta: int) -> None:
        with self.lock:
            value = getattr(self, name) + delta
            setattr(self, name, value)
            peak = name.replace("_open", "_peak") if name.endswith("_open") else name + "_peak"
            if value > getattr(self, peak):
                setattr(self, peak, value)

    def peaks(self) -> dict:
        return {"pathm": self.pathm_peak, "ftsm_streams": self.ftsm_streams_peak,
                "files_in_flight": self.in_flight_peak}


@dataclass
class TreeReport:
    direction: str
    m: int
    n: int
    plan: dict
    files: list[FileResult]
    elapsed: float
    peaks: dict

    @property
    def failed(self) -> list[FileResult]:
        return [f for f in self.files if f.status != "ok"]

    @property
    def bytes_moved(self) -> int:
        return sum(f.bytes for f in self.files if f.status == "ok")

    @property
    def throughput(self) -> float:
        return self.bytes_moved / self.elapsed if self.elapsed > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "direction": self.direction, "m": self.m, "n": self.n, "plan": self.plan,
            "elapsed": self.elapsed, "bytes_moved": self.bytes_moved, "throughput": self.throughput,
            "files_ok": len(self.files) - len(self.failed), "files_failed": len(self.failed),
            "failed": [asdict(f) for f in self.failed], "peaks": self.peaks,
        }

    def write_manifest(self, path: str | os.PathLike) -> None:
        """One JSON object per line: path, bytes, status, ms."""
        with open(path, "w") as fh:
            for f in sorted(self.files, key=lambda r: r.path):
                row = {"path": f.path, "bytes": f.bytes, "status": f.status, "ms": round(f.ms, 3)}
                if f.error:
                    row["error"] = f.error
                fh.write(json.dumps(row) + "\n")


def _join(remote_root: str, rel: str) -> str:
    base = remote_root.rstrip("/") or ""
    return f"{base}/{rel}" if rel else (remote_root or "/")


class _TreeRun:
    """Shared machinery for one tree transfer in either direction."""

    def __init__(self, endpoint, security, m, n, window, block, timeout, filt, stats_hook):
        if m < 1 or n < 1:
            raise ValueError("m and n must be >= 1")
        self.endpoint = endpoint
        self.security = security
        self.m = m
        self.n = n
        self.window = window
        self.block = block
        self.timeout = timeout
        self.filter = filt or PassThrough()
        self.stats = ChannelStats()
        self.results: list[FileResult] = []
        self._results_lock = threading.Lock()
        self.stats_hook = stats_hook

    def record(self, result: FileResult) -> None:
        with self._results_lock:
            self.results.append(result)

    def open_pathm(self) -> PathClient:
        pc = PathClient.connect(self.endpoint, self.security, timeout=self.timeout)
        self.stats.adjust("pathm_open", 1)
        return pc

    def close_pathm(self, pc: PathClient) -> None:
        pc.close()
        self.stats.adjust("pathm_open", -1)

    def run_file(self, channel: str, rel: str, size: int, action: Callable[[], int]) -> None:
        self.stats.adjust("in_flight", 1)
        started = time.perf_counter()
        try:
            moved = action()
            self.record(FileResult(rel, moved, "ok", (time.perf_counter() - started) * 1e3, channel))
        except (DotDfsError, OSError) as exc:
            log.warning("%s failed: %s", rel, exc)
            self.record(FileResult(rel, size, "failed", (time.perf_counter() - started) * 1e3,
                                   channel, f"{type(exc).__name__}: {exc}"))
        finally:
            self.stats.adjust("in_flight", -1)
            if self.stats_hook:
                self.stats_hook(self.stats)

    def small_worker(self, name: str, pc: PathClient, jobs: queue.Queue, transfer) -> None:
        try:
            while True:
                try:
                    item = jobs.get_nowait()
                except queue.Empty:
                    return
                self.run_file(name, item.rel, item.size, lambda: transfer(pc, item))
        finally:
            self.close_pathm(pc)

    def large_worker(self, items: list[FileItem], transfer) -> None:
        session = None
        try:
            for item in items:
                if session is None or not session.is_open:
                    session = FtsmSession(self.endpoint, self.security, self.n, self.window,
                                          self.block, self.timeout)

                def action(item=item, session=session):
                    fresh = not session.is_open
                    try:
                        return transfer(session, item)
                    finally:
                        if fresh and session.is_open:
                            self.stats.adjust("ftsm_streams_open", self.n)
                        elif not fresh and not session.is_open:
                            self.stats.adjust("ftsm_streams_open", -self.n)

                self.run_file("ftsm", item.rel, item.size, action)
        finally:
            if session is not None and session.is_open:
                session.close()
                self.stats.adjust("ftsm_streams_open", -self.n)

    def drain(self, first: PathClient, small: list[FileItem], large: list[FileItem],
              small_transfer, large_transfer) -> None:
        jobs: queue.Queue = queue.Queue()
        for item in small:
            jobs.put(item)
        threads = []
        if large:
            threads.append(threading.Thread(target=self.large_worker, args=(large, large_transfer),
                                            name="tree-ftsm", daemon=True))
        clients = [first]
        try:
            for _ in range(self.m - 1):
                if jobs.qsize() <= len(clients) - 1:
                    break
                clients.append(self.open_pathm())
        except (DotDfsError, OSError):
            for pc in clients:
                self.close_pathm(pc)
            raise
        for i, pc in enumerate(clients):
            threads.append(threading.Thread(target=self.small_worker,
                                            args=(f"pathm-{i + 1}", pc, jobs, small_transfer),
                                            name=f"tree-pathm-{i + 1}", daemon=True))
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    def report(self, direction: str, plan: dict, started: float) -> TreeReport:
        report = TreeReport(direction, self.m, self.n, plan, sorted(self.results, key=lambda r: r.path),
                            time.perf_counter() - started, self.stats.peaks())
        if report.failed:
            raise PartialFailure(f"{len(report.failed)} of {len(report.files)} files failed", report)
        return report


def upload_tree(endpoint: Endpoint, security: Security, local_root: str | os.PathLike,
                remote_root: str, *, m: int = 4, n: int = 4, window: int = 0,
                block: int = wire.DEFAULT_BLOCK, threshold: int = SMALL_FILE_THRESHOLD,
                timeout: float = 30.0, content_filter: ContentFilter | None = None,
                manifest: str | os.PathLike | None = None,
                stats_hook: Callable[[ChannelStats], None] | None = None) -> TreeReport:
    """Mirror a local tree under ``remote_root``; raises PartialFailure if any file fails."""
    started = time.perf_counter()
    plan = plan_tree(local_root, threshold)
    run = _TreeRun(endpoint, security, m, n, window, block, timeout, content_filter, stats_hook)
    first = run.open_pathm()
    try:
        ops = [PathOp.make(Op.CREATE_DIRECTORY, _join(remote_root, d)) for d in plan.directories]
        for reply in first.pipeline(ops):
            reply.raise_for_status()
    except BaseException:
        run.close_pathm(first)
        raise

    def send_small(pc: PathClient, item: FileItem) -> int:
        data = (plan.root / item.rel).read_bytes()
        pc.put_bytes(_join(remote_root, item.rel), run.filter.encode(data))
        return len(data)

    def send_large(session: FtsmSession, item: FileItem) -> int:
        return session.upload(plan.root / item.rel, _join(remote_root, item.rel)).bytes_moved

    run.drain(first, plan.small_files, plan.large_files, send_small, send_large)
    try:
        report = run.report("upload", plan.totals(), started)
    except PartialFailure as exc:
        if manifest:
            exc.report.write_manifest(manifest)
        raise
    if manifest:
        report.write_manifest(manifest)
    return report


def plan_remote_tree(pc: PathClient, remote_root: str, threshold: int = SMALL_FILE_THRESHOLD) -> TreePlan:
    """The remote counterpart of :func:`plan_tree`, built from directory listings."""
    if pc.kind(remote_root) != Kind.DIRECTORY:
        raise IoError(f"{remote_root} is not a remote directory")
    plan = TreePlan(Path(remote_root), threshold=threshold)

    def walk(rel: str) -> None:
        plan.directories.append(rel)
        subdirs = []
        for entry in pc.listdir(_join(remote_root, rel)):
            child = f"{rel}/{entry.name}" if rel else entry.name
            if entry.kind == Kind.DIRECTORY:
                subdirs.append(child)
            else:
                item = FileItem(child, entry.size)
                (plan.small_files if entry.size <= threshold else plan.large_files).append(item)
        for child in subdirs:
            walk(child)

    walk("")
    return plan


def download_tree(endpoint: Endpoint, security: Security, remote_root: str,
                  local_root: str | os.PathLike, *, m: int = 4, n: int = 4, window: int = 0,
                  block: int = wire.DEFAULT_BLOCK, threshold: int = SMALL_FILE_THRESHOLD,
                  timeout: float = 30.0, content_filter: ContentFilter | None = None,
                  manifest: str | os.PathLike | None = None,
                  stats_hook: Callable[[ChannelStats], None] | None = None) -> TreeReport:
    """Mirror a remote tree into ``local_root``; raises PartialFailure if any file fails."""
    started = time.perf_counter()
    local_root = Path(local_root)
    run = _TreeRun(endpoint, security, m, n, window, block, timeout, content_filter, stats_hook)
    first = run.open_pathm()
    try:
        plan = plan_remote_tree(first, remote_root, threshold)
        for d in plan.directories:
            (local_root / d).mkdir(parents=True, exist_ok=True)
    except BaseException:
        run.close_pathm(first)
        raise

    def fetch_small(pc: PathClient, item: FileItem) -> int:
        data = run.filter.decode(pc.get_bytes(_join(remote_root, item.rel)))
        (local_root / item.rel).write_bytes(data)
        return len(data)

    def fetch_large(session: FtsmSession, item: FileItem) -> int:
        return session.download(_join(remote_root, item.rel), local_root / item.rel).bytes_moved

    run.drain(first, plan.small_files, plan.large_files, fetch_small, fetch_large)
    try:
        report = run.report("download", plan.totals(), started)
    except PartialFailure as exc:
        if manifest:
            exc.report.write_manifest(manifest)
        raise
    if manifest:
        report.write_manifest(manifest)
    return report


def tree_digest(root: str | os.PathLike) -> dict[str, tuple]:
    """``{relative path: ("dir",) | ("file", size, sha256)}`` for tree comparison."""
    from .pathm import file_sha256

    root = Path(root)
    out: dict[str, tuple] = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        base = Path(dirpath)
        rel_dir = base.relative_to(root).as_posix()
        out[rel_dir if rel_dir != "." else ""] = ("dir",)
        for name in sorted(filenames):
            path = base / name
            rel = path.relative_to(root).as_posix()
            out[rel] = ("file", path.stat().st_size, file_sha256(path).hex())
    return out


def tree_diff(a: str | os.PathLike, b: str | os.PathLike) -> list[str]:
    """Paths whose presence, type, size or checksum differ between two trees."""
    da, db = tree_digest(a), tree_digest(b)
    return sorted(k for k in da.keys() | db.keys() if da.get(k) != db.get(k))
