"""Block sources, coalescing sinks and the readiness-multiplexed pumps.

The same two loops run on both ends of a transfer: the sending side drives
``send_frames`` (client upload, server download) and the receiving side
drives ``receive_frames`` (server upload, client download).  Each loop runs
in exactly one thread no matter how many streams it services.
"""

from __future__ import annotations

import bisect
import logging
import os
import queue
import selectors
import threading
from typing import BinaryIO, Callable, Sequence

from . import wire
from .errors import IoError, MalformedFrame, OverlapConflict, PeerReset, TransferAborted

log = logging.getLogger(__name__)

COALESCE_CAPACITY = 1024 * 1024
DEFAULT_LFRQ_DEPTH = 16

SelectorFactory = Callable[[], selectors.BaseSelector]


def default_selector() -> selectors.BaseSelector:
    return selectors.DefaultSelector()


def portable_selector() -> selectors.BaseSelector:
    return selectors.SelectSelector()


# -- LFRQ -------------------------------------------------------------------

class Lfrq:
    """Local File Read Queue: sequential read-ahead shared by all streams.

    Blocks are read in increasing offset order through a single file
    handle and each is handed to exactly one caller of :meth:`next`.  With
    ``background=True`` a dedicated reader thread keeps up to ``capacity``
    blocks queued; otherwise blocks are read on demand by the caller.
    """

    def __init__(self, path: str | os.PathLike | None, offset: int, length: int,
                 block: int = wire.DEFAULT_BLOCK, capacity: int = DEFAULT_LFRQ_DEPTH,
                 background: bool = True, zeros: bool = False):
        if block < 1 or block > wire.MAX_PAYLOAD:
            raise ValueError(f"block size {block} outside 1..{wire.MAX_PAYLOAD}")
        self.path = path
        self.offset = offset
        self.end = offset + length
        self.block = block
        self.capacity = capacity
        self.zeros = zeros
        self.files_opened = 0
        self.blocks_read = 0
        self._cursor = offset
        self._lock = threading.Lock()
        self._done = False
        self._stop = threading.Event()
        self._fh: BinaryIO | None = None
        self._zero_block = bytes(block) if zeros else None
        self._queue: queue.Queue | None = None
        self._thread: threading.Thread | None = None
        if background:
            self._queue = queue.Queue(maxsize=capacity)
            self._thread = threading.Thread(target=self._reader, name="lfrq-reader", daemon=True)
            self._thread.start()

    def _open(self) -> None:
        if self._fh is None and not self.zeros:
            self._fh = open(self.path, "rb")
            self.files_opened += 1
            self._fh.seek(self.offset)

    def _read_block(self):
        if self._cursor >= self.end:
            return None
        n = min(self.block, self.end - self._cursor)
        if self.zeros:
            data = self._zero_block if n == self.block else bytes(n)
        else:
            self._open()
            data = self._fh.read(n)
            if len(data) != n:
                raise IoError(f"short read at {self._cursor}: wanted {n}, got {len(data)}")
        item = (self._cursor, data)
        self._cursor += n
        self.blocks_read += 1
        return item

    def _reader(self) -> None:
        try:
            while not self._stop.is_set():
                item = self._read_block()
                if item is None:
                    break
                while not self._stop.is_set():
                    try:
                        self._queue.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
        except Exception as exc:  # surfaces in next()
            self._put_final(exc)
            return
        finally:
            self._close_file()
        self._put_final(None)

    def _put_final(self, value) -> None:
        while not self._stop.is_set():
            try:
                self._queue.put(value, timeout=0.1)
                return
            except queue.Full:
                continue

    def next(self):
        """Return the next ``(offset, block)`` or ``None`` when exhausted."""
        if self._queue is None:
            with self._lock:
                if self._done:
                    return None
                try:
                    item = self._read_block()
                except OSError as exc:
                    raise IoError(str(exc)) from exc
                if item is None:
                    self._done = True
                    self._close_file()
                return item
        with self._lock:
            if self._done:
                return None
            item = self._queue.get()
            if item is None or isinstance(item, BaseException):
                self._done = True
                if isinstance(item, BaseException):
                    if isinstance(item, OSError):
                        raise IoError(str(item)) from item
                    raise item
            return item

    def queued(self) -> int:
        return self._queue.qsize() if self._queue is not None else 0

    def _close_file(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
        self._close_file()


# -- coalescing writer ------------------------------------------------------

def _add_interval(intervals: list, start: int, end: int) -> None:
    """Insert ``[start, end)`` into a sorted list of disjoint intervals, merging."""
    i = bisect.bisect_left(intervals, (start, start))
    if i > 0 and intervals[i - 1][1] >= start:
        i -= 1
    j = i
    while j < len(intervals) and intervals[j][0] <= end:
        start = min(start, intervals[j][0])
        end = max(end, intervals[j][1])
        j += 1
    intervals[i:j] = [(start, end)]


def _overlaps(intervals: list, start: int, end: int):
    i = bisect.bisect_left(intervals, (start, start))
    if i > 0:
        i -= 1
    while i < len(intervals) and intervals[i][0] < end:
        a, b = intervals[i]
        lo, hi = max(a, start), min(b, end)
        if lo < hi:
            yield lo, hi
        i += 1


class NullSink:
    """Discarding sink for memory-to-memory transfers."""

    def __init__(self):
        self.bytes_written = 0

    def seek(self, pos: int) -> None:
        pass

    def write(self, data) -> int:
        self.bytes_written += len(data)
        return len(data)

    def flush(self) -> None:
        pass


class CoalescingWriter:
    """Reassembles out-of-order frames through a fixed 1 MiB window.

    The window is aligned to a multiple of its capacity.  A frame that
    falls outside the current window, a full window, or :meth:`flush`
    writes the buffered ranges out with one write per contiguous run,
    preceded by a seek unless the sink is already positioned there.  Conflicting bytes for the same range raise
    :class:`OverlapConflict`; identical rewrites are accepted.
    """

    def __init__(self, sink, capacity: int = COALESCE_CAPACITY, verify_overlap: bool = True):
        self.sink = sink
        self.capacity = capacity
        self.buffer = bytearray(capacity)
        self.window_start: int | None = None
        self.fill: list[tuple[int, int]] = []
        self.written: list[tuple[int, int]] = []
        self.verify_overlap = verify_overlap
        self.seeks = 0
        self.verify_reads = 0
        self.runs_flushed = 0
        self._pos: int | None = None
        self.flushes = 0
        self.bytes_accepted = 0

    @property
    def allocated(self) -> int:
        return len(self.buffer)

    def write(self, seek: int, payload) -> None:
        view = memoryview(payload).cast("B")
        self.bytes_accepted += len(view)
        pos = seek
        cap = self.capacity
        while len(view):
            if self.window_start is None:
                self.window_start = pos - pos % cap
            rel = pos - self.window_start
            if rel < 0 or rel >= cap:
                self.flush()
                continue
            take = min(len(view), cap - rel)
            self._insert(rel, view[:take])
            pos += take
            view = view[take:]
            if self.fill == [(0, cap)]:
                self.flush()

    def _insert(self, rel: int, data: memoryview) -> None:
        end = rel + len(data)
        for lo, hi in _overlaps(self.fill, rel, end):
            if self.buffer[lo:hi] != data[lo - rel:hi - rel]:
                raise OverlapConflict(f"conflicting bytes at {self.window_start + lo}")
        if self.verify_overlap and self.written:
            base = self.window_start
            for lo, hi in list(_overlaps(self.written, base + rel, base + end)):
                self.sink.seek(lo)
                self._pos = None
                self.verify_reads += 1
                existing = self.sink.read(hi - lo)
                if existing != data[lo - base - rel:hi - base - rel]:
                    raise OverlapConflict(f"conflicting bytes at {lo}")
        self.buffer[rel:end] = data
        _add_interval(self.fill, rel, end)

    def flush(self) -> None:
        if not self.fill:
            self.window_start = None
            return
        base = self.window_start
        view = memoryview(self.buffer)
        for a, b in self.fill:
            if self._pos != base + a:
                self.sink.seek(base + a)
                self.seeks += 1
            self.sink.write(view[a:b])
            self._pos = base + b
            self.runs_flushed += 1
            _add_interval(self.written, base + a, base + b)
        self.fill = []
        self.window_start = None
        self.flushes += 1


# -- pumps ------------------------------------------------------------------

FrameHook = Callable[[int, int, object], None]


def send_frames(streams: Sequence, source: Lfrq, *,
                selector_factory: SelectorFactory = default_selector,
                io_timeout: float = 60.0, on_frame: FrameHook | None = None,
                trace: Callable[[int], None] | None = None) -> list[int]:
    """Feed ``source`` blocks to whichever streams are writable.

    Every stream receives the end-of-transfer sentinel once the source is
    exhausted.  Returns the payload bytes sent per stream.
    """
    sent = [0] * len(streams)
    frames = [0] * len(streams)
    sel = selector_factory()
    try:
        for i, st in enumerate(streams):
            sel.register(st, selectors.EVENT_WRITE, i)
        remaining = len(streams)
        exhausted = False
        while remaining:
            ready = sel.select(io_timeout)
            if not ready:
                raise PeerReset("no stream became writable before the timeout")
            for key, _ in ready:
                i = key.data
                st = streams[i]
                item = None if exhausted else source.next()
                if item is None:
                    exhausted = True
                    st.send(wire.SENTINEL)
                    sel.unregister(st)
                    remaining -= 1
                    if trace:
                        trace(13)
                        if remaining:
                            trace(10)
                    continue
                offset, data = item
                if on_frame is not None:
                    on_frame(i, frames[i], st)
                if trace:
                    trace(12)
                st.send_parts(wire.encode_frame_header(offset, len(data)), data)
                if trace:
                    trace(11)
                    trace(10)
                sent[i] += len(data)
                frames[i] += 1
    finally:
        sel.close()
    return sent


class FrameBuffer:
    """The single receive buffer shared by every stream of a session."""

    def __init__(self, initial: int):
        self.buf = bytearray(initial)

    def view(self, n: int) -> memoryview:
        if n > len(self.buf):
            self.buf = bytearray(n)
        return memoryview(self.buf)[:n]

    @property
    def allocated(self) -> int:
        return len(self.buf)


def receive_frames(streams: Sequence, writer: CoalescingWriter, *,
                   selector_factory: SelectorFactory = default_selector,
                   io_timeout: float = 60.0, frame_buffer: FrameBuffer | None = None,
                   bounds: tuple[int, int] | None = None,
                   on_frame: FrameHook | None = None,
                   trace: Callable[[int], None] | None = None) -> list[int]:
    """Drain frames from all readable streams until each sends the sentinel.

    A stream is read one whole frame at a time into ``frame_buffer``, so the
    session holds a single block-sized buffer regardless of stream count.
    ``bounds`` restricts frames to ``[start, end)``.
    """
    received = [0] * len(streams)
    frames = [0] * len(streams)
    fbuf = frame_buffer or FrameBuffer(wire.DEFAULT_BLOCK)
    sel = selector_factory()
    live = set(range(len(streams)))
    try:
        for i, st in enumerate(streams):
            sel.register(st, selectors.EVENT_READ, i)
        while live:
            ready = [i for i in live if streams[i].has_buffered()]
            if not ready:
                events = sel.select(io_timeout)
                if not events:
                    raise PeerReset("no stream became readable before the timeout")
                ready = [key.data for key, _ in events]
            for i in ready:
                st = streams[i]
                if trace:
                    trace(11)
                header = wire.read_frame_header(st)
                if header is None:
                    sel.unregister(st)
                    live.discard(i)
                    if trace:
                        trace(13)
                        if live:
                            trace(10)
                    continue
                seek, length = header
                if bounds is not None and (seek < bounds[0] or seek + length > bounds[1]):
                    raise MalformedFrame(f"frame [{seek}, {seek + length}) outside {bounds}")
                view = fbuf.view(length)
                st.recv_exact_into(view)
                if on_frame is not None:
                    on_frame(i, frames[i], st)
                if trace:
                    trace(12)
                writer.write(seek, view)
                if trace:
                    trace(10)
                received[i] += length
                frames[i] += 1
        writer.flush()
    finally:
        sel.close()
    return received


def check_aborted(exc: BaseException) -> TransferAborted:
    if isinstance(exc, TransferAborted):
        return exc
    err = TransferAborted(f"transfer aborted: {exc}")
    err.__cause__ = exc
    return err
