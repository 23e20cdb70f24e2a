"""Synthetic scenes: rendered frames, contrast-threshold events and exact boxes.

Events are generated from the latent (undegraded) scene, so the low-light,
high-dynamic-range and blur modes only touch the frames.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boxes import BBox
from .errors import ConfigError
from .events import EventStream, FrameRecord, GroundTruth, Sequence, write_sequence

MODES = ("none", "LL", "HDR", "FWB")
SHAPES = ("rect", "disk")
TEXTURES = ("flat", "checker")
TRAJECTORIES = ("linear", "sinusoidal")
LOG_EPS = 1e-3
CROSSING_TOL = 1e-9
LL_SCALE = 0.15
LL_READ_NOISE = 0.02
HDR_HEADROOM = 0.6


@dataclass
class Trajectory:
    """Object centre and size over time (seconds from the first frame).

    ``linear``: ``waypoints`` rows ``[t, cx, cy, w, h]`` interpolated
    piecewise-linearly and held constant outside their time range.
    ``sinusoidal``: ``center + amplitude * sin(2 pi t / period + phase)`` per
    axis with constant ``size``.
    """

    kind: str = "linear"
    waypoints: list = field(default_factory=lambda: [[0.0, 100.0, 100.0, 40.0, 30.0]])
    center: list = field(default_factory=lambda: [173.0, 130.0])
    amplitude: list = field(default_factory=lambda: [60.0, 0.0])
    period: list = field(default_factory=lambda: [1.0, 1.0])
    phase: list = field(default_factory=lambda: [0.0, 0.0])
    size: list = field(default_factory=lambda: [40.0, 30.0])

    def validate(self):
        if self.kind not in TRAJECTORIES:
            raise ConfigError(f"trajectory kind must be one of {TRAJECTORIES}, got {self.kind!r}")
        if self.kind == "linear":
            wp = np.asarray(self.waypoints, dtype=np.float64)
            if wp.ndim != 2 or wp.shape[1] != 5 or len(wp) == 0:
                raise ConfigError("linear waypoints must be rows [t, cx, cy, w, h]")
            if np.any(np.diff(wp[:, 0]) <= 0):
                raise ConfigError("waypoint times must be strictly increasing")
            if np.any(wp[:, 3:] <= 0):
                raise ConfigError("waypoint sizes must be positive")
        else:
            if min(self.period) <= 0 or min(self.size) <= 0:
                raise ConfigError("sinusoid periods and size must be positive")

    def at(self, t):
        """(cx, cy, w, h) at time ``t`` seconds."""
        if self.kind == "linear":
            wp = np.asarray(self.waypoints, dtype=np.float64)
            return tuple(float(np.interp(t, wp[:, 0], wp[:, k])) for k in range(1, 5))
        c = [
            self.center[k] + self.amplitude[k] * np.sin(2 * np.pi * t / self.period[k] + self.phase[k])
            for k in range(2)
        ]
        return float(c[0]), float(c[1]), float(self.size[0]), float(self.size[1])


@dataclass
class ObjectSpec:
    shape: str = "rect"
    texture: str = "flat"
    intensity: float = 0.8
    checker_period: float = 8.0
    trajectory: Trajectory = field(default_factory=Trajectory)

    def validate(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.texture not in TEXTURES:
            raise ConfigError(f"texture must be one of {TEXTURES}, got {self.texture!r}")
        if not 0 <= self.intensity <= 1:
            raise ConfigError("object intensity must lie in [0, 1]")
        if self.checker_period <= 0:
            raise ConfigError("checker_period must be positive")
        self.trajectory.validate()


@dataclass
class SceneSpec:
    """A synthetic sequence; the first object is the tracked target."""

    width: int = 346
    height: int = 260
    fps: float = 40.0
    num_frames: int = 20
    substeps: int = 16
    objects: list = field(default_factory=lambda: [ObjectSpec()])
    background: float = 0.3
    contrast_threshold: float = 0.15
    mode: str = "none"
    noise_rate: float = 0.0
    seed: int = 0
    name: str = "scene"
    attributes: list = field(default_factory=list)

    def validate(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError("width and height must be positive")
        if self.fps <= 0 or self.num_frames < 1 or self.substeps < 1:
            raise ConfigError("fps > 0, num_frames >= 1 and substeps >= 1 required")
        if not self.contrast_threshold > 0:
            raise ConfigError("contrast threshold must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.noise_rate < 0 or not 0 <= self.background <= 1:
            raise ConfigError("noise_rate >= 0 and background in [0, 1] required")
        if not self.objects:
            raise ConfigError("a scene needs at least one object")
        for obj in self.objects:
            obj.validate()
        period = 1.0 / self.fps
        for j in range(self.num_frames):
            for k, obj in enumerate(self.objects):
                cx, cy, w, h = obj.trajectory.at(j * period)
                if cx + w / 2 <= 0 or cx - w / 2 >= self.width or cy + h / 2 <= 0 or cy - h / 2 >= self.height:
                    raise ConfigError(f"object {k} leaves the image at frame {j}")
        return self

    def frame_times(self):
        """Integer microsecond frame timestamps; frame 0 sits one period after t = 0."""
        period = 1e6 / self.fps
        return [int(round((j + 1) * period)) for j in range(self.num_frames)]

    def to_dict(self):
        return asdict(self)


def spec_from_dict(data: dict) -> SceneSpec:
    data = dict(data)
    try:
        objects = []
        for o in data.pop("objects", [asdict(ObjectSpec())]):
            o = dict(o)
            o["trajectory"] = Trajectory(**o.get("trajectory", {}))
            objects.append(ObjectSpec(**o))
        return SceneSpec(objects=objects, **data).validate()
    except TypeError as exc:
        raise ConfigError(f"scene spec: {exc}") from None


def load_spec(path) -> list[SceneSpec]:
    """A JSON scene file: one spec object, a list of them, or ``{"scenes": [...]}``."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if isinstance(data, dict) and "scenes" in data:
        data = data["scenes"]
    if isinstance(data, dict):
        data = [data]
    return [spec_from_dict(d) for d in data]


# ---------------------------------------------------------------- rendering


def _coverage_1d(lo, hi, n):
    """Fraction of each unit pixel [i, i+1) covered by the interval [lo, hi)."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1, hi) - np.maximum(edges, lo), 0.0, 1.0)


def _object_layer(obj: ObjectSpec, t, width, height):
    """(coverage, value) maps of one object at time ``t``; coverage is anti-aliased."""
    cx, cy, w, h = obj.trajectory.at(t)
    if obj.shape == "rect":
        cov = np.outer(_coverage_1d(cy - h / 2, cy + h / 2, height), _coverage_1d(cx - w / 2, cx + w / 2, width))
    else:
        yy, xx = np.mgrid[0:height, 0:width] + 0.5
        # ellipse inscribed in the box, ~1 px soft edge
        r = np.hypot((xx - cx) / (w / 2), (yy - cy) / (h / 2))
        cov = np.clip((1.0 - r) * min(w, h) / 2 + 0.5, 0.0, 1.0)
    if obj.texture == "flat":
        value = obj.intensity
    else:
        yy, xx = np.mgrid[0:height, 0:width] + 0.5
        p = obj.checker_period
        cell = (np.floor((xx - (cx - w / 2)) / p) + np.floor((yy - (cy - h / 2)) / p)) % 2
        value = np.where(cell == 0, obj.intensity, 0.5 * obj.intensity)
    return cov, value


def render(spec: SceneSpec, t) -> np.ndarray:
    """Latent intensity in [0, 1] at ``t`` seconds after frame-0 time."""
    img = np.full((spec.height, spec.width), float(spec.background))
    for obj in reversed(spec.objects):  # target drawn last, on top
        cov, value = _object_layer(obj, t, spec.width, spec.height)
        img = img * (1.0 - cov) + value * cov
    return img


def log_intensity(image):
    return np.log(image + LOG_EPS)


def target_box(spec: SceneSpec, t) -> BBox:
    cx, cy, w, h = spec.objects[0].trajectory.at(t)
    return BBox.from_center(cx, cy, w, h)


# ---------------------------------------------------------------- events


def threshold_events(L_prev, L_new, L_ref, t_prev, t_new, C):
    """Contrast-threshold crossings between two log-intensity snapshots.

    Each pixel emits ``floor(|L_new - L_ref| / C)`` events, the reference
    moving by ``+-C`` per event; timestamps interpolate linearly between
    ``t_prev`` and ``t_new`` (float microseconds) and are floored to
    integers.  Returns ``(t, x, y, p, L_ref_new)`` with events sorted by time
    (ties in row-major pixel order).
    """
    diff = L_new - L_ref
    count = np.floor(np.abs(diff) / C + CROSSING_TOL).astype(np.int64)
    ys, xs = np.nonzero(count)
    L_ref_new = L_ref + np.sign(diff) * count * C
    if not len(ys):
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty, np.zeros(0, dtype=np.int8), L_ref_new
    k = count[ys, xs]
    sign = np.sign(diff[ys, xs])
    rep = np.repeat(np.arange(len(ys)), k)
    m = np.arange(len(rep)) - np.repeat(np.cumsum(k) - k, k) + 1  # 1..k per pixel
    level = L_ref[ys, xs][rep] + sign[rep] * m * C
    lp, ln = L_prev[ys, xs][rep], L_new[ys, xs][rep]
    span = ln - lp
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(np.abs(span) > 0, (level - lp) / span, 1.0)
    frac = np.clip(frac, 0.0, 1.0)
    t = np.floor(t_prev + frac * (t_new - t_prev)).astype(np.int64)
    x, y = xs[rep].astype(np.int64), ys[rep].astype(np.int64)
    p = sign[rep].astype(np.int8)
    order = np.lexsort((x, y, t))
    return t[order], x[order], y[order], p[order], L_ref_new


def _noise_events(rng, rate, width, height, t_prev, t_new):
    expected = rate * width * height * (t_new - t_prev) * 1e-6
    n = int(rng.poisson(expected)) if expected > 0 else 0
    t = np.floor(rng.uniform(t_prev, t_new, n)).astype(np.int64)
    x = rng.integers(0, width, n)
    y = rng.integers(0, height, n)
    p = rng.choice(np.array([-1, 1], dtype=np.int8), n)
    return t, x, y, p


# ---------------------------------------------------------------- frames


def _degrade(latent_frames, spec: SceneSpec, rng):
    out = []
    for img in latent_frames:
        if spec.mode == "LL":
            img = img * LL_SCALE + rng.normal(0.0, LL_READ_NOISE, img.shape)
        elif spec.mode == "HDR":
            img = np.minimum(img, HDR_HEADROOM) / HDR_HEADROOM
        out.append(np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8))
    return out


@dataclass
class SimOutput:
    frames: list[FrameRecord]
    stream: EventStream
    gt: GroundTruth
    meta: dict
    latent: list | None = None

    def to_sequence(self) -> Sequence:
        return Sequence(self.stream, self.frames, self.gt, self.meta, self.meta.get("name", ""))


def simulate(spec: SceneSpec, keep_latent=False) -> SimOutput:
    """Render ``spec``: frames at the frame times, events over ``[0, T_last]``.

    Frame ``j`` is the substep snapshot at ``T_j``; in FWB mode it is the mean
    of the substep snapshots over the exposure ``(T_{j-1}, T_j]``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    times = spec.frame_times()
    period = 1e6 / spec.fps
    t0_us = times[0] - period  # events start one period before frame 0

    def scene_t(t_us):
        return (t_us - times[0]) / 1e6

    img = render(spec, scene_t(t0_us))
    L_prev = log_intensity(img)
    L_ref = L_prev.copy()
    chunks = []
    latent_frames, latent = [], [] if keep_latent else None
    t_prev = t0_us
    bounds = [t0_us] + times
    for j in range(spec.num_frames):
        exposure = []
        for s in range(1, spec.substeps + 1):
            t_new = bounds[j] + (bounds[j + 1] - bounds[j]) * s / spec.substeps
            img = render(spec, scene_t(t_new))
            L_new = log_intensity(img)
            t, x, y, p, L_ref = threshold_events(L_prev, L_new, L_ref, t_prev, t_new, spec.contrast_threshold)
            if spec.noise_rate > 0:
                nt, nx, ny, npol = _noise_events(rng, spec.noise_rate, spec.width, spec.height, t_prev, t_new)
                t, x, y, p = (np.concatenate(a) for a in ((t, nt), (x, nx), (y, ny), (p, npol)))
                order = np.argsort(t, kind="stable")
                t, x, y, p = t[order], x[order], y[order], p[order]
            chunks.append((t, x, y, p))
            exposure.append(img)
            if keep_latent:
                latent.append(img)
            L_prev, t_prev = L_new, t_new
        latent_frames.append(np.mean(exposure, axis=0) if spec.mode == "FWB" else img)

    cols = [np.concatenate([c[k] for c in chunks]) for k in range(4)]
    # floor() can land an event exactly on the previous chunk's last integer time, so
    # the concatenation is already sorted; a stable sort keeps that guarantee explicit
    order = np.argsort(cols[0], kind="stable")
    stream = EventStream(spec.width, spec.height, *(c[order] for c in cols))

    images = _degrade(latent_frames, spec, rng)
    frames = [FrameRecord(j, times[j], images[j]) for j in range(spec.num_frames)]
    gt = GroundTruth({j: target_box(spec, scene_t(times[j])) for j in range(spec.num_frames)})
    attributes = list(spec.attributes) or ([spec.mode] if spec.mode != "none" else [])
    meta = {"width": spec.width, "height": spec.height, "fps": spec.fps, "name": spec.name,
            "attributes": attributes, "seed": spec.seed}
    return SimOutput(frames, stream, gt, meta, latent)


# ---------------------------------------------------------------- datasets


def default_specs(count=8, seed=0, width=346, height=260, num_frames=20, mode=None):
    """``count`` varied scenes (shapes, textures, trajectories); deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(count):
        w = float(rng.uniform(0.12, 0.2) * width)
        h = float(rng.uniform(0.12, 0.2) * height)
        fg, bg = (0.75, 0.25) if i % 2 == 0 else (0.2, 0.7)
        duration = num_frames / 40.0
        if i % 3 == 2:
            cx, cy = width / 2, height / 2
            traj = Trajectory(kind="sinusoidal", center=[cx, cy],
                              amplitude=[float(rng.uniform(0.15, 0.25) * width), float(rng.uniform(0.0, 0.15) * height)],
                              period=[float(rng.uniform(0.8, 1.6) * duration)] * 2,
                              phase=[float(rng.uniform(0, 2 * np.pi)), 0.0], size=[w, h])
        else:
            start = rng.uniform([0.25 * width, 0.25 * height], [0.4 * width, 0.75 * height])
            speed = rng.uniform(0.25, 0.6) * width / duration  # pixels per second
            angle = rng.uniform(-0.6, 0.6) + (np.pi if i % 4 == 1 else 0.0)
            if i % 4 == 1:
                start[0] = width - start[0]
            end = start + speed * duration * np.array([np.cos(angle), np.sin(angle)])
            end = np.clip(end, [w / 2, h / 2], [width - w / 2, height - h / 2])
            traj = Trajectory(kind="linear", waypoints=[[0.0, *map(float, start), w, h],
                                                        [duration, *map(float, end), w, h]])
        target = ObjectSpec(shape=SHAPES[i % 2 if i < 4 else (i // 2) % 2],
                            texture=TEXTURES[(i // 2) % 2], intensity=fg, trajectory=traj)
        specs.append(SceneSpec(width=width, height=height, num_frames=num_frames, objects=[target],
                               background=bg, mode=mode or "none", seed=seed * 1000 + i,
                               name=f"sim_{i:02d}"))
    return specs


def fast_motion_specs(count=4, seed=0, width=346, height=260, num_frames=20, mode="FWB", frames_per_cycle=(8, 12)):
    """Oscillating targets fast enough that a frame-long exposure smears them over about their own width."""
    rng = np.random.default_rng(seed + 50_000)
    fps = 40.0
    specs = []
    for i in range(count):
        w = float(rng.uniform(0.12, 0.18) * width)
        h = float(rng.uniform(0.14, 0.2) * height)
        period = float(rng.uniform(*frames_per_cycle)) / fps
        # peak speed 2 pi A / period set to ~1.2 box widths per frame
        amp_x = min(1.2 * w * fps * period / (2 * np.pi), 0.5 * width - 0.5 * w)
        amp_y = float(rng.uniform(0.0, 0.1) * height)
        fg, bg = (0.8, 0.2) if i % 2 == 0 else (0.15, 0.65)
        traj = Trajectory(kind="sinusoidal", center=[width / 2, height / 2], amplitude=[float(amp_x), amp_y],
                          period=[period, 2 * period], phase=[float(rng.uniform(0, 2 * np.pi)), 0.0], size=[w, h])
        target = ObjectSpec(shape=SHAPES[i % 2], texture=TEXTURES[(i // 2) % 2], intensity=fg, trajectory=traj)
        specs.append(SceneSpec(width=width, height=height, fps=fps, num_frames=num_frames, objects=[target],
                               background=bg, mode=mode, seed=seed * 1000 + 500 + i, name=f"fast_{i:02d}",
                               attributes=["FWB" if mode == "FWB" else "FNB"] + ([mode] if mode not in ("none", "FWB") else [])))
    return specs


def make_dataset(specs, out_dir, event_format="evt"):
    """Simulate and write every spec under ``out_dir/<name>``; returns the directories."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError("scene names must be unique within a dataset")
    dirs = []
    for spec in specs:
        sim = simulate(spec)
        meta = dict(sim.meta)
        meta["spec"] = spec.to_dict()
        dirs.append(write_sequence(out / spec.name, sim.stream, sim.frames, sim.gt, meta, event_format))
    return dirs
