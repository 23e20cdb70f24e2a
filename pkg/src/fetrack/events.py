"""Event streams, frame records, ground truth, and the on-disk sequence layout.

A sequence directory contains::

    meta.json          {"width": W, "height": H, "fps": F, ...}
    frames/%06d.pgm    binary P5, maxval 255
    events.csv | events.evt
    gt.txt             frame_index,x,y,w,h

Timestamps are integer microseconds throughout.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import BBox
from .errors import GeometryError, NotFound, ParseError, RangeError

logger = logging.getLogger(__name__)

EVT_MAGIC = b"FE01"
EVT_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
CSV_HEADER = "t_us,x,y,p"


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


class EventStream:
    """Immutable column store of events on a ``width`` x ``height`` sensor."""

    __slots__ = ("width", "height", "t", "x", "y", "p", "_sorted")

    def __init__(self, width, height, t=(), x=(), y=(), p=()):
        self.width = int(width)
        self.height = int(height)
        self.t = _frozen(np.asarray(t, dtype=np.int64))
        self.x = _frozen(np.asarray(x, dtype=np.int64))
        self.y = _frozen(np.asarray(y, dtype=np.int64))
        self.p = _frozen(np.asarray(p, dtype=np.int8))
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns have different lengths")
        self._sorted = bool(n < 2 or np.all(np.diff(self.t) >= 0))

    @classmethod
    def empty(cls, width, height):
        return cls(width, height)

    @classmethod
    def from_events(cls, width, height, events):
        events = list(events)
        cols = np.array([(e.t, e.x, e.y, e.p) for e in events], dtype=np.int64).reshape(-1, 4)
        return cls(width, height, cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3])

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def __repr__(self):
        span = f"{self.t[0]}..{self.t[-1]} us" if len(self) else "empty"
        return f"EventStream({self.width}x{self.height}, {len(self)} events, {span})"

    @property
    def is_sorted(self):
        return self._sorted

    def select(self, index):
        """Sub-stream by boolean mask or index array (order follows ``index``)."""
        return EventStream(self.width, self.height, self.t[index], self.x[index], self.y[index], self.p[index])


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FrameRecord:
    index: int
    T: int
    image: np.ndarray  # uint8, H x W


@dataclass
class GroundTruth:
    boxes: dict[int, BBox] = field(default_factory=dict)

    def __getitem__(self, index):
        return self.boxes[index]

    def __contains__(self, index):
        return index in self.boxes

    def __len__(self):
        return len(self.boxes)

    def indices(self):
        return sorted(self.boxes)


@dataclass
class ValidationReport:
    sortedness: list[int] = field(default_factory=list)
    out_of_bounds: list[int] = field(default_factory=list)
    polarity: list[int] = field(default_factory=list)

    @property
    def is_empty(self):
        return not (self.sortedness or self.out_of_bounds or self.polarity)

    def __len__(self):
        return len(self.sortedness) + len(self.out_of_bounds) + len(self.polarity)


def validate(stream: EventStream) -> ValidationReport:
    """List every invariant violation; indices refer to positions in ``stream``."""
    t, x, y, p = stream.t, stream.x, stream.y, stream.p
    descents = np.nonzero(np.diff(t) < 0)[0] + 1 if len(t) > 1 else np.zeros(0, dtype=np.int64)
    oob = np.nonzero((x < 0) | (x >= stream.width) | (y < 0) | (y >= stream.height))[0]
    bad_p = np.nonzero((p != 1) & (p != -1))[0]
    return ValidationReport(descents.tolist(), oob.tolist(), bad_p.tolist())


def slice_stream(stream: EventStream, t0, t1, closed_end=False) -> EventStream:
    """Events with ``t0 <= t < t1`` (``t <= t1`` when ``closed_end``), order preserved."""
    if t0 > t1:
        raise RangeError(f"slice start {t0} after end {t1}")
    if stream.is_sorted:
        lo = np.searchsorted(stream.t, t0, side="left")
        hi = np.searchsorted(stream.t, t1, side="right" if closed_end else "left")
        return stream.select(np.s_[lo:hi])
    keep = (stream.t >= t0) & ((stream.t <= t1) if closed_end else (stream.t < t1))
    return stream.select(keep)


# ---------------------------------------------------------------- file IO


def read_events_csv(path, width=None, height=None) -> EventStream:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip().replace(" ", "") != CSV_HEADER:
        raise ParseError(f"{path.name}: expected header '{CSV_HEADER}'", line=1)
    body = [ln for ln in lines[1:]]
    rows = np.empty((len(body), 4), dtype=np.int64)
    try:
        if body:
            rows[:] = np.loadtxt(body, delimiter=",", dtype=np.int64, ndmin=2)
    except ValueError:
        for i, ln in enumerate(body):
            parts = ln.split(",")
            try:
                if len(parts) != 4:
                    raise ValueError
                rows[i] = [int(v) for v in parts]
            except ValueError:
                raise ParseError(f"{path.name}: malformed record {ln!r}", line=i + 2) from None
    bad = np.nonzero((rows[:, 3] != 1) & (rows[:, 3] != -1))[0]
    if len(bad):
        raise ParseError(f"{path.name}: polarity must be -1 or 1", line=int(bad[0]) + 2)
    if np.any(rows[:, 0] < 0):
        raise ParseError(f"{path.name}: negative timestamp", line=int(np.argmax(rows[:, 0] < 0)) + 2)
    return EventStream(width or 0, height or 0, rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3])


def write_events_csv(path, stream: EventStream):
    cols = np.stack([stream.t, stream.x, stream.y, stream.p.astype(np.int64)], axis=1)
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        if len(cols):
            np.savetxt(fh, cols, fmt="%d", delimiter=",")


def read_events_evt(path) -> EventStream:
    raw = Path(path).read_bytes()
    if raw[:4] != EVT_MAGIC:
        raise ParseError(f"{Path(path).name}: bad magic {raw[:4]!r}", offset=0)
    if len(raw) < 12:
        raise ParseError(f"{Path(path).name}: truncated header", offset=len(raw))
    width, height = np.frombuffer(raw, dtype="<u4", count=2, offset=4)
    body = len(raw) - 12
    if body % EVT_RECORD.itemsize:
        offset = 12 + (body // EVT_RECORD.itemsize) * EVT_RECORD.itemsize
        raise ParseError(f"{Path(path).name}: truncated record", offset=offset)
    rec = np.frombuffer(raw, dtype=EVT_RECORD, offset=12)
    bad = np.nonzero((rec["p"] != 1) & (rec["p"] != -1))[0]
    if len(bad):
        raise ParseError(f"{Path(path).name}: polarity must be -1 or 1", offset=12 + int(bad[0]) * EVT_RECORD.itemsize)
    return EventStream(int(width), int(height), rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"])


def write_events_evt(path, stream: EventStream):
    rec = np.empty(len(stream), dtype=EVT_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    with open(path, "wb") as fh:
        fh.write(EVT_MAGIC)
        fh.write(np.array([stream.width, stream.height], dtype="<u4").tobytes())
        fh.write(rec.tobytes())


def read_pgm(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode != "L":
                raise ParseError(f"{Path(path).name}: expected 8-bit binary PGM, got {im.format}/{im.mode}")
            return np.array(im, dtype=np.uint8)
    except FileNotFoundError:
        raise NotFound(str(path)) from None
    except OSError as exc:
        raise ParseError(f"{Path(path).name}: {exc}") from None


def write_pgm(path, image: np.ndarray):
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path, format="PPM")


def read_gt(path) -> GroundTruth:
    boxes = {}
    for lineno, ln in enumerate(Path(path).read_text().splitlines(), start=1):
        if not ln.strip() or ln.lstrip().startswith("#"):
            continue
        parts = ln.split(",")
        try:
            if len(parts) != 5:
                raise ValueError
            idx = int(parts[0])
            box = BBox(*(float(v) for v in parts[1:]))
        except ValueError:
            raise ParseError(f"{Path(path).name}: malformed box record {ln!r}", line=lineno) from None
        if not (box.w > 0 and box.h > 0):
            raise ParseError(f"{Path(path).name}: box must have positive extent", line=lineno)
        boxes[idx] = box
    return GroundTruth(boxes)


def write_gt(path, gt: GroundTruth):
    with open(path, "w") as fh:
        for idx in gt.indices():
            b = gt[idx]
            fh.write(f"{idx},{b.x!r},{b.y!r},{b.w!r},{b.h!r}\n")


# ---------------------------------------------------------------- sequences


@dataclass
class Sequence:
    """A loaded sequence directory; unpacks as ``(stream, frames, gt)``."""

    stream: EventStream
    frames: list[FrameRecord]
    gt: GroundTruth
    meta: dict = field(default_factory=dict)
    name: str = ""

    def __iter__(self):
        return iter((self.stream, self.frames, self.gt))

    @property
    def width(self):
        return self.stream.width

    @property
    def height(self):
        return self.stream.height

    @property
    def fps(self):
        return float(self.meta.get("fps", 0.0))

    @property
    def attributes(self):
        return list(self.meta.get("attributes", []))

    def frame_period(self):
        if len(self.frames) > 1:
            return int(self.frames[1].T - self.frames[0].T)
        return int(round(1e6 / self.fps))

    def interval(self, index):
        """Event interval feeding frame ``index``: from the previous frame up to this one."""
        T = self.frames[index].T
        prev = self.frames[index - 1].T if index > 0 else T - self.frame_period()
        return prev, T


def frame_times(meta, count):
    if "timestamps_us" in meta:
        ts = [int(v) for v in meta["timestamps_us"]]
        if len(ts) < count:
            raise ParseError(f"meta.json lists {len(ts)} timestamps for {count} frames")
        return ts[:count]
    fps = float(meta["fps"])
    return [int(round(j * 1e6 / fps)) for j in range(count)]


def load_sequence(directory) -> Sequence:
    """Load and validate a sequence directory.

    Events outside ``[T_0 - period, T_last]`` are dropped.
    """
    d = Path(directory)
    if not d.is_dir():
        raise NotFound(f"sequence directory {d} does not exist")
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise NotFound(f"{meta_path} missing")
    try:
        meta = json.loads(meta_path.read_text())
        width, height = int(meta["width"]), int(meta["height"])
        float(meta["fps"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"meta.json: {exc}") from None

    frame_paths = sorted((d / "frames").glob("*.pgm")) if (d / "frames").is_dir() else []
    if not frame_paths:
        raise NotFound(f"{d / 'frames'} has no .pgm frames")
    times = frame_times(meta, len(frame_paths))
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ParseError("frame timestamps must be strictly increasing")
    frames = []
    for j, (fp, T) in enumerate(zip(frame_paths, times)):
        img = read_pgm(fp)
        if img.shape != (height, width):
            raise GeometryError(f"{fp.name}: {img.shape[1]}x{img.shape[0]} frame on a {width}x{height} sensor")
        frames.append(FrameRecord(j, T, img))

    if (d / "events.evt").exists():
        stream = read_events_evt(d / "events.evt")
        if (stream.width, stream.height) != (width, height):
            raise GeometryError(
                f"events.evt declares {stream.width}x{stream.height}, meta.json {width}x{height}"
            )
    elif (d / "events.csv").exists():
        raw = read_events_csv(d / "events.csv")
        stream = EventStream(width, height, raw.t, raw.x, raw.y, raw.p)
    else:
        raise NotFound(f"{d} has neither events.evt nor events.csv")

    report = validate(stream)
    if report.out_of_bounds:
        i = report.out_of_bounds[0]
        raise GeometryError(f"event {i} at ({stream.x[i]}, {stream.y[i]}) outside {width}x{height}")
    if report.sortedness:
        order = np.argsort(stream.t, kind="stable")
        logger.warning("%s: %d unsorted events, stable-sorting", d.name, len(report.sortedness))
        stream = stream.select(order)

    period = times[1] - times[0] if len(times) > 1 else int(round(1e6 / float(meta["fps"])))
    lo, hi = times[0] - period, times[-1]
    if len(stream) and (stream.t[0] < lo or stream.t[-1] > hi):
        keep = (stream.t >= lo) & (stream.t <= hi)
        logger.info("%s: dropping %d events outside [%d, %d]", d.name, int((~keep).sum()), lo, hi)
        stream = stream.select(keep)

    gt_path = d / "gt.txt"
    if not gt_path.exists():
        raise NotFound(f"{gt_path} missing")
    gt = read_gt(gt_path)
    for idx in gt.indices():
        if not 0 <= idx < len(frames):
            raise ParseError(f"gt.txt references frame {idx}, sequence has {len(frames)}")
    return Sequence(stream, frames, gt, meta, meta.get("name", d.name))


def write_sequence(directory, stream: EventStream, frames, gt: GroundTruth, meta=None, event_format="evt"):
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    meta.setdefault("width", stream.width)
    meta.setdefault("height", stream.height)
    meta["timestamps_us"] = [int(f.T) for f in frames]
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for f in frames:
        write_pgm(d / "frames" / f"{f.index:06d}.pgm", f.image)
    if event_format == "evt":
        write_events_evt(d / "events.evt", stream)
    elif event_format == "csv":
        write_events_csv(d / "events.csv", stream)
    else:
        raise ValueError(f"unknown event format {event_format!r}")
    write_gt(d / "gt.txt", gt)
    return d
