"""Event-to-frame aggregation.

The tracker's own method keeps, per pixel and per time bin, the polarity of the
most recent event: 255 for ON, 0 for OFF, 127 where nothing fired.  The five
baselines used in ablations live in :func:`aggregate_baseline`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RangeError
from .events import EventStream, slice_stream

LATEST = "latest_polarity"
BASELINES = ("event_count", "event_frame", "time_surface", "tsltd", "zhu_voxel")
METHODS = (LATEST,) + BASELINES
EMPTY_VALUE = 127


@dataclass(frozen=True)
class BinSpec:
    T_start: int
    T_end: int
    n: int

    def __post_init__(self):
        if not (isinstance(self.n, (int, np.integer)) and self.n >= 1):
            raise RangeError(f"bin count must be a positive integer, got {self.n!r}")
        if not self.T_end > self.T_start:
            raise RangeError(f"empty interval [{self.T_start}, {self.T_end}]")

    @property
    def B(self) -> float:
        return (self.T_end - self.T_start) / self.n

    def edges(self) -> list[float]:
        return [self.T_start + i * self.B for i in range(self.n + 1)]

    def bin_index(self, t) -> np.ndarray:
        """Bin of each timestamp, computed in exact integer arithmetic; T_end lands in the last bin."""
        t = np.asarray(t, dtype=np.int64)
        idx = ((t - self.T_start) * self.n) // (self.T_end - self.T_start)
        return np.minimum(idx, self.n - 1)


def channels_for(method: str) -> int:
    if method in (LATEST, "event_frame", "zhu_voxel"):
        return 1
    if method in ("event_count", "time_surface", "tsltd"):
        return 2
    raise ConfigError(f"unknown aggregation method {method!r}; expected one of {METHODS}")


@dataclass(frozen=True)
class AggregatedFrames:
    frames: np.ndarray  # uint8, (n, channels, H, W)
    method: str
    spec: BinSpec

    @property
    def n(self):
        return self.frames.shape[0]

    @property
    def channels(self):
        return self.frames.shape[1]

    def as_unit(self) -> np.ndarray:
        """Frames scaled to [0, 1] reals, the form the event feature extractor consumes."""
        return self.frames.astype(np.float64) / 255.0


def bin_events(stream: EventStream, spec: BinSpec) -> list[EventStream]:
    """Split the events in ``[T_start, T_end]`` into ``n`` half-open bins, last bin closed."""
    window = slice_stream(stream, spec.T_start, spec.T_end, closed_end=True)
    if not len(window):
        return [window] * spec.n
    idx = spec.bin_index(window.t)
    if window.is_sorted:
        bounds = np.searchsorted(idx, np.arange(spec.n + 1), side="left")
        return [window.select(np.s_[bounds[i]:bounds[i + 1]]) for i in range(spec.n)]
    return [window.select(idx == i) for i in range(spec.n)]


def aggregate_latest_polarity(bin_stream: EventStream, width: int, height: int) -> np.ndarray:
    """One uint8 frame: polarity of the latest event per pixel, ties going to the later stream position."""
    frame = np.full((height, width), EMPTY_VALUE, dtype=np.uint8)
    if not len(bin_stream):
        return frame
    order = np.argsort(bin_stream.t, kind="stable")
    pix = (bin_stream.y * width + bin_stream.x)[order]
    pol = bin_stream.p[order]
    # last occurrence per pixel in (t, stream order)
    rev_pix = pix[::-1]
    uniq, first_in_rev = np.unique(rev_pix, return_index=True)
    last = len(pix) - 1 - first_in_rev
    frame.ravel()[uniq] = np.where(pol[last] > 0, 255, 0).astype(np.uint8)
    return frame


def _latest_times(bin_stream, width, height, polarity):
    """Per-pixel latest timestamp for one polarity, -1 where absent."""
    latest = np.full(height * width, -1, dtype=np.int64)
    sel = bin_stream.p == polarity
    np.maximum.at(latest, bin_stream.y[sel] * width + bin_stream.x[sel], bin_stream.t[sel])
    return latest.reshape(height, width)


def aggregate_baseline(bin_stream: EventStream, method: str, params: dict | None, width: int, height: int) -> np.ndarray:
    """Float maps in [0, 255] for the comparison representations.

    ``params`` carries ``T_start``/``T_end`` (the bin's interval, required by the
    time-based methods), ``tau`` for time surfaces, and ``num_bins`` for the
    voxel grid.  Returns ``(channels, H, W)``; for ``zhu_voxel`` channels equal
    ``num_bins``.
    """
    params = dict(params or {})
    if method not in BASELINES:
        raise ConfigError(f"unknown baseline {method!r}; expected one of {BASELINES}")
    n_pix = height * width
    pix = bin_stream.y * width + bin_stream.x

    if method == "event_count":
        pos = np.bincount(pix[bin_stream.p > 0], minlength=n_pix).astype(np.float64)
        neg = np.bincount(pix[bin_stream.p < 0], minlength=n_pix).astype(np.float64)
        out = np.stack([pos, neg]).reshape(2, height, width)
        peak = out.max()
        return out * (255.0 / peak) if peak > 0 else out

    if method == "event_frame":
        s = np.bincount(pix, weights=bin_stream.p.astype(np.float64), minlength=n_pix).reshape(1, height, width)
        peak = np.abs(s).max()
        return 127.0 + 127.0 * (s / peak) if peak > 0 else np.full_like(s, 127.0)

    t_start = params.get("T_start", int(bin_stream.t.min()) if len(bin_stream) else 0)
    t_end = params.get("T_end", int(bin_stream.t.max()) if len(bin_stream) else 1)
    span = float(t_end - t_start)
    if span <= 0:
        raise RangeError("baseline interval must have positive length")

    if method in ("time_surface", "tsltd"):
        out = np.zeros((2, height, width), dtype=np.float64)
        tau = float(params.get("tau") or span / 3.0)
        for c, pol in enumerate((1, -1)):
            latest = _latest_times(bin_stream, width, height, pol)
            has = latest >= 0
            age = (t_end - latest[has]).astype(np.float64)
            if method == "time_surface":
                # libm exp: numpy's vectorised exp varies by a ULP across CPU builds
                out[c][has] = 255.0 * np.fromiter(map(math.exp, -age / tau), np.float64, len(age))
            else:
                out[c][has] = 255.0 * np.maximum(0.0, 1.0 - age / span)
        return out

    # zhu_voxel: bilinear temporal splat of polarity into num_bins slices
    nb = int(params.get("num_bins", 1))
    vox = np.zeros((nb, n_pix), dtype=np.float64)
    if len(bin_stream):
        tn = (nb - 1) * (bin_stream.t - t_start).astype(np.float64) / span if nb > 1 else np.zeros(len(bin_stream))
        pol = bin_stream.p.astype(np.float64)
        for b in range(nb):
            w = np.maximum(0.0, 1.0 - np.abs(b - tn))
            np.add.at(vox[b], pix, pol * w)
    vox = vox.reshape(nb, height, width)
    peak = np.abs(vox).max()
    return 127.5 * (1.0 + vox / peak) if peak > 0 else np.full_like(vox, 127.5)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def aggregate_interframe(stream: EventStream, T_j: int, T_next: int, n: int, method: str = LATEST,
                         params: dict | None = None) -> AggregatedFrames:
    """Aggregate the events between two frames into ``n`` frames of ``channels_for(method)`` planes."""
    spec = BinSpec(int(T_j), int(T_next), int(n))
    channels_for(method)
    W, H = stream.width, stream.height
    if method == "zhu_voxel":
        window = slice_stream(stream, spec.T_start, spec.T_end, closed_end=True)
        vox = aggregate_baseline(window, method, {"T_start": spec.T_start, "T_end": spec.T_end, "num_bins": n}, W, H)
        return AggregatedFrames(_quantize(vox)[:, None], method, spec)
    bins = bin_events(stream, spec)
    edges = spec.edges()
    planes = []
    for i, b in enumerate(bins):
        if method == LATEST:
            planes.append(aggregate_latest_polarity(b, W, H)[None])
        else:
            p = {"T_start": edges[i], "T_end": edges[i + 1], **(params or {})}
            planes.append(_quantize(aggregate_baseline(b, method, p, W, H)))
    return AggregatedFrames(np.stack(planes), method, spec)


def throughput(stream: EventStream, T_j: int, T_next: int, n: int, method: str = LATEST, repeats: int = 3) -> float:
    """Aggregated events per second of wall clock (best of ``repeats``)."""
    count = len(slice_stream(stream, T_j, T_next, closed_end=True))
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        aggregate_interframe(stream, T_j, T_next, n, method)
        best = min(best, time.perf_counter() - t0)
    return count / best if best > 0 else float("inf")
