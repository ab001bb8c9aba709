"""Throughput models for parallel TCP streams and empirical (n, W) tuning.

The analytic part is the steady-state congestion-avoidance model: one
stream achieves ``(MSS / RTT) * (C / sqrt(p))`` and ``n`` streams are bounded
by the sum of their individual rates.  The empirical part fits a bilinear
surface ``z = f(n, W)`` through measured samples and scans it for the
stream count and window size with the highest predicted throughput.

All bandwidths are bytes per second.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

C_DELAYED_ACK = 0.87  # at least every other segment acknowledged
C_EVERY_ACK = 1.22  # every segment acknowledged

RECOMMEND_RESOLUTION = 200
CSV_HEADER = ("n", "window_bytes", "bw_bytes_per_s")


class DomainError(ValueError):
    pass


class DegenerateGrid(ValueError):
    pass


@dataclass(frozen=True)
class ThroughputParams:
    mss: float
    rtt: float
    p: float
    c: float = C_DELAYED_ACK
    n: int = 1

    def __post_init__(self):
        if not (self.mss > 0 and self.rtt > 0 and self.c > 0):
            raise DomainError("mss, rtt and c must be positive")
        if not 0 < self.p <= 1:
            raise DomainError(f"loss ratio must satisfy 0 < p <= 1, got {self.p}")
        if self.n < 1:
            raise DomainError("stream count must be >= 1")

    @property
    def k(self) -> float:
        """Rate factor MSS / RTT."""
        return self.mss / self.rtt

    @property
    def w(self) -> float:
        """Window factor C / sqrt(p)."""
        return self.c / math.sqrt(self.p)


def single_stream_bw(params: ThroughputParams) -> float:
    return params.k * params.w


def parallel_bw(params: ThroughputParams) -> float:
    """``n`` identical streams: ``k * n * W``, evaluated as n times one stream."""
    return params.n * single_stream_bw(params)


def aggregate_bw_bound(streams: Sequence[ThroughputParams]) -> float:
    """Upper bound ``C * sum(MSS_i / RTT_i / sqrt(p_i))`` for heterogeneous streams.

    ``C`` multiplies the whole sum, so all streams must share it.
    """
    if not streams:
        raise DomainError("at least one stream is required")
    c = streams[0].c
    if any(s.c != c for s in streams):
        raise DomainError("all streams must share the acknowledgment constant")
    return c * math.fsum(s.k / math.sqrt(s.p) for s in streams)


def to_mbit(bw: float) -> float:
    return bw * 8 / 1e6


def format_mbit(bw: float) -> str:
    return f"{to_mbit(bw):.3g} Mbit/s"


# -- empirical surface ---------------------------------------------------------

@dataclass(frozen=True)
class ThroughputSample:
    n: float
    window: float
    bw: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.n, self.window, self.bw)):
            raise DomainError("sample values must be finite")


@dataclass(frozen=True, eq=False)
class Surface:
    """Bilinear interpolant on a rectangular grid; ``z[i, j]`` is at ``(ns[i], windows[j])``."""

    ns: np.ndarray
    windows: np.ndarray
    z: np.ndarray
    kind: str = "bilinear"

    def __call__(self, n, window):
        n = np.clip(np.asarray(n, dtype=float), self.ns[0], self.ns[-1])
        window = np.clip(np.asarray(window, dtype=float), self.windows[0], self.windows[-1])
        i = np.clip(np.searchsorted(self.ns, n, side="right") - 1, 0, len(self.ns) - 2)
        j = np.clip(np.searchsorted(self.windows, window, side="right") - 1, 0, len(self.windows) - 2)
        n0, n1 = self.ns[i], self.ns[i + 1]
        w0, w1 = self.windows[j], self.windows[j + 1]
        tx = (n - n0) / (n1 - n0)
        ty = (window - w0) / (w1 - w0)
        z = self.z
        lo = _lerp(z[i, j], z[i + 1, j], tx)
        hi = _lerp(z[i, j + 1], z[i + 1, j + 1], tx)
        out = _lerp(lo, hi, ty)
        return out if out.ndim else float(out)

    def node_residuals(self, samples: Iterable[ThroughputSample]) -> np.ndarray:
        """Surface minus the cell-averaged sample value at every sampled node."""
        cells = _cell_means(list(samples))
        return np.array([self(n, w) - mean for (n, w), mean in cells.items()])


def _lerp(a, b, t):
    # exact at t == 0 and t == 1, and exact when a == b
    return np.where(t == 1, b, a + t * (b - a))


def _cell_means(samples: list[ThroughputSample]) -> dict[tuple[float, float], float]:
    sums: dict[tuple[float, float], list[float]] = {}
    for s in samples:
        sums.setdefault((float(s.n), float(s.window)), []).append(s.bw)
    return {key: math.fsum(v) / len(v) for key, v in sums.items()}


def fit_surface(samples: Iterable[ThroughputSample]) -> Surface:
    """Snap samples to the grid of their unique axis values and interpolate.

    Duplicate cells are averaged.  Cells no sample hit are filled by linear
    interpolation over the scattered nodes (nearest value outside their hull).
    """
    samples = list(samples)
    if len(samples) < 4:
        raise DegenerateGrid("at least 4 samples are needed")
    cells = _cell_means(samples)
    ns = np.array(sorted({n for n, _ in cells}))
    windows = np.array(sorted({w for _, w in cells}))
    if len(ns) < 2 or len(windows) < 2:
        raise DegenerateGrid("samples must span at least two stream counts and two windows")
    z = np.full((len(ns), len(windows)), np.nan)
    n_index = {v: i for i, v in enumerate(ns)}
    w_index = {v: j for j, v in enumerate(windows)}
    for (n, w), mean in cells.items():
        z[n_index[n], w_index[w]] = mean
    missing = np.isnan(z)
    if missing.any():
        z[missing] = _fill(cells, ns, windows, missing)
    return Surface(ns, windows, z)


def _fill(cells, ns, windows, missing) -> np.ndarray:
    from scipy.interpolate import griddata

    # normalise axes so the triangulation is not dominated by byte-valued windows
    def norm(n, w):
        return np.column_stack(((n - ns[0]) / (ns[-1] - ns[0]), (w - windows[0]) / (windows[-1] - windows[0])))

    pts = np.array(list(cells.keys()))
    vals = np.array(list(cells.values()))
    gi, gj = np.nonzero(missing)
    query = norm(ns[gi], windows[gj])
    src = norm(pts[:, 0], pts[:, 1])
    try:
        out = griddata(src, vals, query, method="linear")
    except Exception:  # collinear nodes: no triangulation
        out = np.full(len(query), np.nan)
    holes = np.isnan(out)
    if holes.any():
        out[holes] = griddata(src, vals, query[holes], method="nearest")
    return out


@dataclass(frozen=True)
class Recommendation:
    n: float
    window: float
    bw: float


def recommend(surface: Surface, resolution: int = RECOMMEND_RESOLUTION) -> Recommendation:
    """Dense scan of the surface; ties go to fewer streams, then smaller windows.

    Grid nodes are always part of the scan, so the result is never below the
    best sampled node.
    """
    ns = np.union1d(np.linspace(surface.ns[0], surface.ns[-1], resolution), surface.ns)
    ws = np.union1d(np.linspace(surface.windows[0], surface.windows[-1], resolution), surface.windows)
    gn, gw = np.meshgrid(ns, ws, indexing="ij")
    z = surface(gn, gw)
    # row-major argmax returns the first maximum: smallest n, then smallest W
    i, j = np.unravel_index(int(np.argmax(z)), z.shape)
    return Recommendation(float(ns[i]), float(ws[j]), float(z[i, j]))


# -- CSV -------------------------------------------------------------------------

def load_samples(path: str | os.PathLike) -> list[ThroughputSample]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames[:3]) != CSV_HEADER:
            raise DomainError(f"{path}: expected header {','.join(CSV_HEADER)}")
        samples = []
        for r in reader:
            try:
                samples.append(ThroughputSample(*(float(r[k]) for k in CSV_HEADER)))
            except (TypeError, ValueError) as exc:
                if isinstance(exc, DomainError):
                    raise
                raise DomainError(f"{path}:{reader.line_num}: {exc}") from None
        return samples


def save_samples(samples: Iterable[ThroughputSample], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(CSV_HEADER)
        for s in samples:
            out.writerow((_num(s.n), _num(s.window), repr(float(s.bw))))


def export_surface(surface: Surface, path: str | os.PathLike, resolution: int | None = None) -> None:
    """Write the surface as ``n,window_bytes,bw_bytes_per_s`` rows, one per grid point."""
    if resolution:
        ns = np.linspace(surface.ns[0], surface.ns[-1], resolution)
        ws = np.linspace(surface.windows[0], surface.windows[-1], resolution)
    else:
        ns, ws = surface.ns, surface.windows
    gn, gw = np.meshgrid(ns, ws, indexing="ij")
    save_samples((ThroughputSample(a, b, c) for a, b, c in
                  zip(gn.ravel(), gw.ravel(), np.ravel(surface(gn, gw)))), path)


def _num(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)
