"""Online tracking: classifier argmax for the centre, IoU ascent for the box."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .boxes import BBox
from .errors import BoxError, DataError, StateError
from .heads import ModulationVectors, label_for_box, optimize_filter
from .model import TrackerNet
from .training import prepare_inputs

logger = logging.getLogger(__name__)


@dataclass
class TrackerConfig:
    candidates: int = 10
    refine_steps: int = 5
    step_size: float = 0.01  # per ascent step, as a fraction of the box dims
    top_m: int = 3
    max_halvings: int = 4
    jitter: float = 0.1
    reoptimize_every: int = 0  # U; 0 disables filter updates after init
    seed: int = 0


@dataclass
class TrackerState:
    modulation: ModulationVectors
    filter: Tensor
    box: BBox
    frame: int
    config: TrackerConfig
    width: int
    height: int
    rng: np.random.Generator = field(repr=False, default=None)

    def check(self):
        self.box.validate()
        if not np.all(np.isfinite(self.filter.data)):
            raise StateError("target filter is not finite")


@dataclass
class StepResult:
    box: BBox
    confidence: float
    w_f: float
    w_e: float


def _weights(features):
    """Mean adaptive weights over levels, NaN when the model has none."""
    w = features.weights or {}
    if not w:
        return float("nan"), float("nan")
    return (float(np.mean([d["w_f"] for d in w.values()])), float(np.mean([d["w_e"] for d in w.values()])))


def _features(model, frame, events):
    with no_grad():
        return model.cdfi(frame[None], events[None])


def init(model: TrackerNet, frame, events, box: BBox, config: TrackerConfig | None = None,
         image_size=None) -> TrackerState:
    """Reference branch: modulation vectors and an optimised target filter.

    ``frame`` (1, H, W) and ``events`` (n, C, H, W) are padded unit-scaled
    inputs as produced by :func:`prepare_inputs`; ``image_size`` is the
    unpadded (width, height) used to clamp boxes.
    """
    config = config or TrackerConfig()
    box = BBox(*box.as_array()) if isinstance(box, BBox) else BBox.from_array(box)
    box.validate()
    model.eval()
    feats = _features(model, frame, events)
    with no_grad():
        mod = model.regressor.compute_modulation(feats.low, feats.high, box)
        cls = model.classifier.features(feats.low)
        label = label_for_box(box, cls.shape[2:], k=model.config.heads.filter_size)
        filt = model.classifier.learn_filter(cls, box, label)
    width, height = image_size or (frame.shape[-1], frame.shape[-2])
    state = TrackerState(mod, filt, box, 0, config, int(width), int(height), np.random.default_rng(config.seed))
    state.check()
    return state


def refine_boxes(model: TrackerNet, test_feats, mod, boxes, config: TrackerConfig):
    """Gradient ascent on predicted IoU w.r.t. (x, y, w, h) with backtracking.

    Each candidate moves by ``step_size`` times its own dims along the
    max-normalised gradient; a step that lowers its predicted IoU is halved
    up to ``max_halvings`` times and dropped if it still does not help, so
    every candidate's predicted IoU is non-decreasing.  Returns
    (boxes (M, 4), predicted IoU (M,), per-step IoU history).
    """
    boxes = np.array(boxes, dtype=np.float64)
    M = len(boxes)
    bidx = np.zeros(M, dtype=np.int64)

    def score(b):
        with no_grad():
            return model.regressor.predict_from_features(test_feats, mod, b, bidx).data.copy()

    current = score(boxes)
    history = [current.copy()]
    for _ in range(config.refine_steps):
        bt = Tensor(boxes, requires_grad=True)
        pred = model.regressor.predict_from_features(test_feats, mod, bt, bidx)
        pred.sum().backward()
        g = bt.grad
        norm = np.maximum(np.abs(g).max(axis=1, keepdims=True), 1e-12)
        dims = boxes[:, [2, 3, 2, 3]]
        step = config.step_size * dims * g / norm
        pending = np.ones(M, dtype=bool)
        for _ in range(config.max_halvings + 1):
            trial = boxes.copy()
            trial[pending] += step[pending]
            trial[:, 2:] = np.maximum(trial[:, 2:], 1.0)
            new = score(trial)
            better = pending & (new >= current)
            boxes[better] = trial[better]
            current[better] = new[better]
            pending &= ~better
            if not pending.any():
                break
            step *= 0.5
        history.append(current.copy())
    return boxes, current, history


def track_step(model: TrackerNet, state: TrackerState, frame, events) -> StepResult:
    """Locate the target in one padded test frame and update ``state``."""
    if state is None:
        raise StateError("tracker not initialised")
    cfg = state.config
    feats = _features(model, frame, events)
    with no_grad():
        cls = model.classifier.features(feats.low)
        smap = model.classifier.score_map(cls, state.filter)
        test_feats = model.regressor.test_features(feats.low, feats.high)
    peak = smap.argmax()
    prev = state.box
    if peak is None:
        cx, cy = prev.center  # flat map: keep the previous centre
        confidence = float(smap.scores.max()) if np.isfinite(smap.scores).all() else 0.0
    else:
        cx, cy = smap.cell_to_image(*peak)
        confidence = float(smap.scores[peak[1], peak[0]])
    centre = BBox.from_center(cx, cy, prev.w, prev.h).clamp(state.width, state.height)

    cands = [centre.as_array()]
    for _ in range(cfg.candidates - 1):
        w = centre.w * np.exp(cfg.jitter * state.rng.standard_normal())
        h = centre.h * np.exp(cfg.jitter * state.rng.standard_normal())
        dx, dy = cfg.jitter * centre.w * state.rng.standard_normal(), cfg.jitter * centre.h * state.rng.standard_normal()
        cands.append(BBox.from_center(centre.center[0] + dx, centre.center[1] + dy, w, h).as_array())
    boxes, pred, _ = refine_boxes(model, test_feats, state.modulation, np.array(cands), cfg)
    top = np.argsort(-pred, kind="stable")[: cfg.top_m]
    box = BBox.from_array(boxes[top].mean(axis=0)).clamp(state.width, state.height)

    state.box = box
    state.frame += 1
    if cfg.reoptimize_every and state.frame % cfg.reoptimize_every == 0:
        with no_grad():
            label = label_for_box(box, cls.shape[2:], k=state.filter.shape[2])
            h = model.config.heads
            state.filter = optimize_filter(state.filter, cls, label, h.optimizer_steps, h.step_eps, h.fallback_step)
    state.check()
    w_f, w_e = _weights(feats)
    return StepResult(box, confidence, w_f, w_e)


@dataclass
class TrackResult:
    boxes: list[BBox]
    confidences: list[float]
    w_f: list[float]
    w_e: list[float]
    seconds: float = 0.0

    @property
    def fps(self):
        frames = len(self.boxes) - 1
        return frames / self.seconds if self.seconds > 0 and frames > 0 else float("nan")

    def lines(self):
        return [
            ",".join([str(j)] + [repr(float(v)) for v in (*b.as_array(), c, wf, we)])
            for j, (b, c, wf, we) in enumerate(zip(self.boxes, self.confidences, self.w_f, self.w_e))
        ]

    def append(self, step: StepResult):
        self.boxes.append(step.box)
        self.confidences.append(step.confidence)
        self.w_f.append(step.w_f)
        self.w_e.append(step.w_e)

    def write(self, path):
        Path(path).write_text("\n".join(self.lines()) + "\n")


def iter_track(model: TrackerNet, sequence, config: TrackerConfig | None = None):
    """Generator over a sequence: the first item initialises on frame 0's ground
    truth, each later item tracks one more frame.  Yields :class:`StepResult`."""
    if 0 not in sequence.gt:
        raise DataError("sequence has no ground truth for frame 0")
    cfg = model.config.cdfi
    size = (sequence.width, sequence.height)
    frame, events = prepare_inputs(sequence, 0, cfg.n_bins, cfg.aggregation)
    state = init(model, frame, events, sequence.gt[0], config, size)
    yield StepResult(state.box, 1.0, float("nan"), float("nan"))
    for j in range(1, len(sequence.frames)):
        frame, events = prepare_inputs(sequence, j, cfg.n_bins, cfg.aggregation)
        yield track_step(model, state, frame, events)


def track_sequence(model: TrackerNet, sequence, config: TrackerConfig | None = None, progress=None) -> TrackResult:
    """Initialise on frame 0's ground truth and track every later frame.

    ``seconds`` is the wall-clock time of the per-frame loop (aggregation,
    network, refinement), excluding initialisation.
    """
    steps = iter_track(model, sequence, config)
    first = next(steps)
    result = TrackResult([first.box], [first.confidence], [first.w_f], [first.w_e])
    start = time.perf_counter()
    for j, r in enumerate(steps, 1):
        result.append(r)
        if progress is not None:
            progress(j, r)
    result.seconds = time.perf_counter() - start
    return result


def read_predictions(path):
    """Boxes from a prediction file (``frame_index,x,y,w,h[,...]`` lines) as {index: BBox}."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        try:
            out[int(parts[0])] = BBox(*map(float, parts[1:5]))
        except (ValueError, TypeError, IndexError):
            raise DataError(f"{path}:{n}: expected frame_index,x,y,w,h") from None
    return out


def draw_boxes(image, boxes, colors=((255, 0, 0), (0, 255, 0))):
    """RGB copy of a grayscale frame with box outlines, for ``--dump-vis``."""
    from PIL import Image, ImageDraw

    rgb = Image.fromarray(image).convert("RGB")
    draw = ImageDraw.Draw(rgb)
    for box, color in zip(boxes, colors):
        if box is not None:
            draw.rectangle([box.x, box.y, box.x + box.w - 1, box.y + box.h - 1], outline=color)
    return rgb


def dump_visualisation(sequence, result: TrackResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for f, box in zip(sequence.frames, result.boxes):
        gt = sequence.gt[f.index] if f.index in sequence.gt else None
        draw_boxes(f.image, [box, gt]).save(out / f"{f.index:06d}.ppm", format="PPM")
