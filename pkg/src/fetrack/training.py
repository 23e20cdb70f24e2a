"""Siamese pair sampling and the Adam training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .aggregation import EMPTY_VALUE, aggregate_interframe
from .autodiff import Adam, Tensor, no_grad
from .boxes import BBox, box_iou
from .cdfi import pad_to_multiple
from .errors import ConfigError, DataError, NumericsError
from .heads import classify, label_for_box
from .loss import LossReport, bbox_loss, classification_loss, total_loss
from .model import TrackerNet, save_model

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_classifier: float = 1e-3
    lr_regressor: float = 1e-3
    lr_cdfi: float = 1e-4
    lr_decay: float = 0.2
    decay_every: int = 5
    epochs: int = 10
    batch_size: int = 4
    steps_per_epoch: int = 20
    seed: int = 0
    beta: float = 1.0
    max_gap: int = 10
    candidates: int = 8
    jitter: float = 0.1

    def __post_init__(self):
        if min(self.lr_classifier, self.lr_regressor, self.lr_cdfi) < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.steps_per_epoch < 1 or self.decay_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, steps_per_epoch >= 1, decay_every >= 1 required")

    @classmethod
    def full_scale(cls, **overrides):
        """Full-scale schedule: 50 epochs, batch 26, decay every 15 epochs."""
        return cls(**{"epochs": 50, "batch_size": 26, "decay_every": 15, **overrides})

    def base_rates(self):
        return {"classifier": self.lr_classifier, "regressor": self.lr_regressor, "cdfi": self.lr_cdfi}


def learning_rate(base, epoch, decay=0.2, every=5):
    return base * decay ** (epoch // every)


@dataclass(frozen=True)
class TrainingPair:
    sequence: int
    reference: int
    test: int


def _annotated(seq):
    return [i for i in seq.gt.indices() if i < len(seq.frames)]


def sample_pairs(dataset, count, seed=0, max_gap=10):
    """Reference/test frame pairs; sequences drawn uniformly, test within ``max_gap`` after the reference."""
    if not dataset:
        raise DataError("cannot sample pairs from an empty dataset")
    usable = []
    for s, seq in enumerate(dataset):
        ann = _annotated(seq)
        if len(ann) < 2:
            raise DataError(f"sequence {getattr(seq, 'name', s)!r} needs at least 2 annotated frames")
        usable.append(np.asarray(ann))
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        s = int(rng.integers(len(dataset)))
        ann = usable[s]
        # references that have a later annotated frame within the gap
        later = np.searchsorted(ann, ann + max_gap, side="right") - np.arange(len(ann)) - 1
        refs = np.nonzero(later > 0)[0]
        if not len(refs):
            raise DataError(f"sequence {s} has no annotated frames within {max_gap} of each other")
        r = int(refs[rng.integers(len(refs))])
        t = r + 1 + int(rng.integers(later[r]))
        pairs.append(TrainingPair(s, int(ann[r]), int(ann[t])))
    return pairs


class InputCache:
    """Padded, unit-scaled network inputs per (sequence, frame)."""

    def __init__(self, dataset, n_bins, method):
        self.dataset = dataset
        self.n_bins = n_bins
        self.method = method
        self._cache = {}

    def get(self, s, j):
        key = (s, j)
        if key not in self._cache:
            self._cache[key] = prepare_inputs(self.dataset[s], j, self.n_bins, self.method)
        return self._cache[key]


def prepare_inputs(seq, j, n_bins, method):
    """Frame ``j`` as (1, H, W) and its preceding events as (n_bins, C, H, W), padded to stride 16."""
    frame = pad_to_multiple(seq.frames[j].image.astype(np.float64) / 255.0)[None]
    t0, t1 = seq.interval(j)
    agg = aggregate_interframe(seq.stream, t0, t1, n_bins, method)
    events = pad_to_multiple(agg.as_unit(), value=EMPTY_VALUE / 255.0)
    return frame, events


def jitter_boxes(box: BBox, count, sigma, rng, width, height):
    """``count`` Gaussian perturbations of ``box`` (std ``sigma`` x box size) and their IoU with it."""
    base = box.as_array()
    out = np.empty((count, 4))
    for i in range(count):
        w = max(2.0, box.w * (1.0 + sigma * rng.standard_normal()))
        h = max(2.0, box.h * (1.0 + sigma * rng.standard_normal()))
        cx = box.center[0] + sigma * box.w * rng.standard_normal()
        cy = box.center[1] + sigma * box.h * rng.standard_normal()
        out[i] = BBox.from_center(cx, cy, w, h).as_array()
    return out, box_iou(out, base[None])


@dataclass
class Batch:
    frames: np.ndarray  # (2B, 1, H, W): references then tests
    events: np.ndarray  # (2B, n, C, H, W)
    ref_boxes: np.ndarray  # (B, 4)
    test_boxes: np.ndarray
    candidates: np.ndarray  # (B*K, 4)
    candidate_index: np.ndarray
    iou_targets: np.ndarray
    pairs: list = field(default_factory=list)

    @property
    def size(self):
        return len(self.ref_boxes)


def make_batch(dataset, pairs, cache: InputCache, rng, candidates=8, jitter=0.1):
    frames_r, frames_t, ev_r, ev_t = [], [], [], []
    ref_boxes, test_boxes, cands, cidx, targets = [], [], [], [], []
    shapes = set()
    for b, p in enumerate(pairs):
        seq = dataset[p.sequence]
        fr, er = cache.get(p.sequence, p.reference)
        ft, et = cache.get(p.sequence, p.test)
        shapes.add(fr.shape)
        frames_r.append(fr)
        ev_r.append(er)
        frames_t.append(ft)
        ev_t.append(et)
        ref_boxes.append(seq.gt[p.reference].as_array())
        tb = seq.gt[p.test]
        test_boxes.append(tb.as_array())
        c, iou = jitter_boxes(tb, candidates, jitter, rng, seq.width, seq.height)
        cands.append(c)
        targets.append(iou)
        cidx.append(np.full(candidates, b))
    if len(shapes) != 1:
        raise DataError(f"batch mixes input resolutions {sorted(shapes)}")
    return Batch(
        np.stack(frames_r + frames_t),
        np.stack(ev_r + ev_t),
        np.array(ref_boxes),
        np.array(test_boxes),
        np.concatenate(cands),
        np.concatenate(cidx),
        np.concatenate(targets),
        list(pairs),
    )


def forward_losses(model: TrackerNet, batch: Batch, beta=1.0):
    """Network losses for a batch; returns (total, classification, box) tensors."""
    B = batch.size
    feats = model.cdfi(batch.frames, batch.events)
    k_low, k_high = feats.low, feats.high
    ref_low, test_low = k_low[:B], k_low[B:]
    ref_high, test_high = k_high[:B], k_high[B:]

    cls_feat = model.classifier.features(k_low)
    map_shape = k_low.shape[2:]
    k = model.config.heads.filter_size
    cls_terms = []
    for i in range(B):
        ref_box = BBox.from_array(batch.ref_boxes[i])
        test_box = BBox.from_array(batch.test_boxes[i])
        filt = model.classifier.learn_filter(cls_feat[i:i + 1], ref_box, label_for_box(ref_box, map_shape, k=k))
        score = classify(cls_feat[B + i:B + i + 1], filt)
        cls_terms.append(classification_loss(score, label_for_box(test_box, map_shape, k=k)))
    l_cls = cls_terms[0]
    for t in cls_terms[1:]:
        l_cls = l_cls + t
    l_cls = l_cls * (1.0 / B)

    mod = model.regressor.compute_modulation(ref_low, ref_high, Tensor(batch.ref_boxes))
    pred = model.regressor.predict_iou(test_low, test_high, mod, Tensor(batch.candidates), batch.candidate_index)
    l_b = bbox_loss(pred, batch.iou_targets)
    return total_loss(l_cls, l_b, beta), l_cls, l_b


def make_optimizer(model: TrackerNet, config: TrainConfig):
    groups = model.parameter_groups()
    rates = config.base_rates()
    return Adam({name: (rates[name], params) for name, params in groups.items()})


def train_step(model: TrackerNet, batch: Batch, optimizer: Adam, beta=1.0) -> LossReport:
    """Forward, backward, Adam update; the returned losses are from before the update."""
    model.train()
    optimizer.zero_grad()
    l_tot, l_cls, l_b = forward_losses(model, batch, beta)
    report = LossReport(l_tot.item(), l_cls.item(), l_b.item(), beta)
    if not np.isfinite([report.L_total, report.L_cls, report.L_b]).all():
        raise NumericsError(
            f"non-finite loss (total={report.L_total}, cls={report.L_cls}, box={report.L_b}) "
            f"on pairs {[(p.sequence, p.reference, p.test) for p in batch.pairs]}"
        )
    l_tot.backward()
    optimizer.step()
    return report


def calibrate_beta(model: TrackerNet, dataset, config: TrainConfig, batches=4):
    """Power of ten closest to mean(L_b) / mean(L_cls) for the untrained model.

    Weighting the classification term by this puts both terms on the same order
    of magnitude at the start of training.  The model (including batch-norm
    running statistics) is left untouched.
    """
    cfg = model.config.cdfi
    cache = InputCache(dataset, cfg.n_bins, cfg.aggregation)
    pairs = sample_pairs(dataset, batches * config.batch_size, config.seed + 104729, config.max_gap)
    rng = np.random.default_rng(config.seed + 104729)
    saved, was_training = model.state_dict(), model.training
    cls, box = [], []
    try:
        model.train()
        with no_grad():
            for b in range(batches):
                batch = make_batch(dataset, pairs[b * config.batch_size:(b + 1) * config.batch_size], cache, rng,
                                   config.candidates, config.jitter)
                _, l_cls, l_b = forward_losses(model, batch)
                cls.append(l_cls.item())
                box.append(l_b.item())
    finally:
        model.load_state_dict(saved)
        model.train(was_training)
    mean_cls, mean_box = float(np.mean(cls)), float(np.mean(box))
    if not (mean_cls > 0 and mean_box > 0 and np.isfinite(mean_cls + mean_box)):
        return 1.0
    return float(10.0 ** np.round(np.log10(mean_box / mean_cls)))


@dataclass
class TrainResult:
    losses: list[LossReport]
    checkpoints: list[Path]
    rates: list[dict]


def train(model: TrackerNet, dataset, config: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    """Run ``config.epochs`` epochs of ``steps_per_epoch`` batches; write per-epoch checkpoints and a loss CSV."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    cfg = model.config.cdfi
    cache = InputCache(dataset, cfg.n_bins, cfg.aggregation)
    optimizer = make_optimizer(model, config)
    total_steps = config.epochs * config.steps_per_epoch
    pairs = sample_pairs(dataset, total_steps * config.batch_size, config.seed, config.max_gap) if total_steps else []
    rng = np.random.default_rng(config.seed + 7919)
    losses, checkpoints, rates = [], [], []
    csv = None
    if out is not None:
        csv = open(out / "loss.csv", "w")
        csv.write("step,L_total,L_cls,L_b\n")
    try:
        step = 0
        for epoch in range(config.epochs):
            epoch_rates = {}
            for name, base in config.base_rates().items():
                lr = learning_rate(base, epoch, config.lr_decay, config.decay_every)
                optimizer.set_lr(name, lr)
                epoch_rates[name] = lr
            rates.append(epoch_rates)
            for _ in range(config.steps_per_epoch):
                chunk = pairs[step * config.batch_size:(step + 1) * config.batch_size]
                batch = make_batch(dataset, chunk, cache, rng, config.candidates, config.jitter)
                report = train_step(model, batch, optimizer, config.beta)
                step += 1
                losses.append(report)
                if csv is not None:
                    csv.write(report.row(step) + "\n")
                if progress is not None:
                    progress(step, report)
                logger.debug("step %d: total %.4f cls %.4f box %.4f", step, report.L_total, report.L_cls, report.L_b)
            if out is not None:
                path = out / f"epoch_{epoch + 1:03d}.fetw"
                save_model(model, path)
                checkpoints.append(path)
            logger.info("epoch %d done, mean loss %.4f", epoch + 1,
                        np.mean([r.L_total for r in losses[-config.steps_per_epoch:]]))
        if out is not None:
            save_model(model.eval(), out / "model.fetw")
            (out / "train_config.json").write_text(_json(asdict(config)))
    finally:
        if csv is not None:
            csv.close()
    model.eval()
    return TrainResult(losses, checkpoints, rates)


def _json(obj):
    import json
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
