"""Box regressor (IoU modulation + IoU prediction) and filter-based target classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Conv2d,
    Linear,
    Module,
    Tensor,
    as_tensor,
    concat,
    conv2d,
    mean,
    pad2d,
    region_pool,
    relu,
    sqrt,
    square,
    take,
    tsum,
)
from .boxes import BBox
from .cdfi import STRIDE_HIGH, STRIDE_LOW
from .errors import BoxError, ShapeError
from .loss import FOREGROUND_THRESHOLD


@dataclass
class HeadConfig:
    filter_size: int = 4
    optimizer_steps: int = 5
    iou_pool_low: int = 5
    iou_pool_high: int = 3
    iou_dim_low: int | None = None  # defaults to the low-level channel width
    iou_dim_high: int | None = None
    pool_samples: int = 2
    step_eps: float = 1e-8
    fallback_step: float = 0.1


@dataclass
class ModulationVectors:
    low: Tensor  # (N, iou_dim_low)
    high: Tensor  # (N, iou_dim_high)


@dataclass
class GaussianLabel:
    z: np.ndarray
    center: tuple[float, float]  # (col, row) in score-cell units
    sigma: float


@dataclass
class ScoreMap:
    scores: np.ndarray  # H' x W'
    stride: int
    offset: float  # score index u sits at feature cell u + offset

    def cell_to_image(self, col, row):
        return ((col + self.offset + 0.5) * self.stride, (row + self.offset + 0.5) * self.stride)

    def argmax(self):
        """(col, row) of the peak, or None when the map is flat."""
        s = self.scores
        if not np.isfinite(s).all() or s.max() - s.min() <= 1e-12 * max(1.0, abs(s.max())):
            return None
        row, col = np.unravel_index(int(np.argmax(s)), s.shape)
        return int(col), int(row)


def _boxes_tensor(boxes):
    if isinstance(boxes, BBox):
        boxes = boxes.as_array()[None]
    boxes = as_tensor(boxes)
    if boxes.ndim == 1:
        boxes = boxes.reshape(1, 4)
    d = boxes.data
    if not (np.all(d[:, 2] > 0) and np.all(d[:, 3] > 0)) or not np.all(np.isfinite(d)):
        raise BoxError("boxes must be finite with positive width and height")
    return boxes


class IoURegressor(Module):
    def __init__(self, c_low, c_high, rng, cfg: HeadConfig):
        self.cfg = cfg
        dl = cfg.iou_dim_low or c_low
        dh = cfg.iou_dim_high or c_high
        pl, ph = cfg.iou_pool_low, cfg.iou_pool_high
        self.ref_conv_low = Conv2d(c_low, c_low, 3, rng)
        self.ref_fc_low = Linear(c_low * pl * pl, dl, rng)
        self.ref_conv_high = Conv2d(c_high, c_high, 3, rng)
        self.mod_low = Linear(dl + c_high * ph * ph, dl, rng)
        self.mod_high = Linear(dl + c_high * ph * ph, dh, rng)
        self.test_conv_low1 = Conv2d(c_low, c_low, 3, rng)
        self.test_conv_low2 = Conv2d(c_low, c_low, 3, rng)
        self.test_conv_high1 = Conv2d(c_high, c_high, 3, rng)
        self.test_conv_high2 = Conv2d(c_high, c_high, 3, rng)
        self.test_fc_low = Linear(c_low * pl * pl, dl, rng)
        self.test_fc_high = Linear(c_high * ph * ph, dh, rng)
        self.iou_fc = Linear(dl + dh, 1, rng)

    def _pool(self, feat, boxes, bidx, size, stride):
        pooled = region_pool(feat, boxes, bidx, size, 1.0 / stride, self.cfg.pool_samples)
        return pooled.reshape(pooled.shape[0], -1)

    def compute_modulation(self, k_low, k_high, boxes) -> ModulationVectors:
        """One modulation vector pair per reference image; ``boxes`` holds one box per image."""
        boxes = _boxes_tensor(boxes)
        bidx = np.arange(boxes.shape[0])
        a = relu(self.ref_fc_low(self._pool(relu(self.ref_conv_low(k_low)), boxes, bidx, self.cfg.iou_pool_low, STRIDE_LOW)))
        b = self._pool(relu(self.ref_conv_high(k_high)), boxes, bidx, self.cfg.iou_pool_high, STRIDE_HIGH)
        q = concat([a, b], axis=1)
        return ModulationVectors(self.mod_low(q), self.mod_high(q))

    def test_features(self, k_low, k_high):
        low = relu(self.test_conv_low2(relu(self.test_conv_low1(k_low))))
        high = relu(self.test_conv_high2(relu(self.test_conv_high1(k_high))))
        return low, high

    def predict_from_features(self, feats, mod: ModulationVectors, boxes, batch_index=None):
        """Predicted IoU, shape (M,), for boxes on pre-computed test features."""
        boxes = _boxes_tensor(boxes)
        M = boxes.shape[0]
        bidx = np.zeros(M, dtype=np.int64) if batch_index is None else np.asarray(batch_index, dtype=np.int64)
        low, high = feats
        t_low = relu(self.test_fc_low(self._pool(low, boxes, bidx, self.cfg.iou_pool_low, STRIDE_LOW)))
        t_high = relu(self.test_fc_high(self._pool(high, boxes, bidx, self.cfg.iou_pool_high, STRIDE_HIGH)))
        joint = concat([t_low * take(mod.low, bidx), t_high * take(mod.high, bidx)], axis=1)
        return self.iou_fc(joint).reshape(M)

    def predict_iou(self, k_low, k_high, mod: ModulationVectors, boxes, batch_index=None):
        return self.predict_from_features(self.test_features(k_low, k_high), mod, boxes, batch_index)


def filter_padding(k):
    """Padding that keeps the score map the size of the feature map for a k x k filter."""
    before = (k - 1) // 2
    after = k - 1 - before
    return before, after


def score_offset(k):
    before, _ = filter_padding(k)
    return (k - 1) / 2.0 - before


def make_label(center, target_size, map_shape, stride=STRIDE_LOW):
    """Gaussian target map.

    ``center`` is (col, row) in score-cell units, ``target_size`` the box
    (w, h) in pixels, ``map_shape`` (rows, cols).  Spread is
    ``max(1, sqrt(w*h)/4/stride)`` cells.
    """
    w, h = target_size
    sigma = max(1.0, 0.25 * np.sqrt(w * h) / stride)
    rows, cols = map_shape
    cx, cy = center
    yy, xx = np.mgrid[0:rows, 0:cols]
    z = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma ** 2))
    return GaussianLabel(z, (float(cx), float(cy)), float(sigma))


def image_to_cell(x, y, stride=STRIDE_LOW, k=4):
    off = score_offset(k)
    return x / stride - 0.5 - off, y / stride - 0.5 - off


def label_for_box(box: BBox, map_shape, stride=STRIDE_LOW, k=4):
    cx, cy = box.center
    return make_label(image_to_cell(cx, cy, stride, k), (box.w, box.h), map_shape, stride)


def init_filter(feat, box, k=4, samples=2, stride=STRIDE_LOW):
    """Region-pool the target area of a (1, C, H, W) map into a (1, C, k, k) filter."""
    boxes = _boxes_tensor(box)
    return region_pool(feat, boxes, [0], k, 1.0 / stride, samples)


def classify(feat, filt):
    """Score map (N, 1, H, W): correlation of ``feat`` with a (1, C, k, k) filter."""
    feat, filt = as_tensor(feat), as_tensor(filt)
    if filt.ndim != 4 or filt.shape[0] != 1 or filt.shape[1] != feat.shape[1]:
        raise ShapeError(f"filter {filt.shape} does not match features {feat.shape}")
    k = filt.shape[2]
    b, a = filter_padding(k)
    return conv2d(feat, filt, None, 1, (b, a, b, a))


def _masks(score, z):
    fg = z > FOREGROUND_THRESHOLD
    active = fg | (score > 0)
    target = np.where(fg, z, 0.0)
    return active.astype(np.float64), target


def frozen_loss(feat, filt, z, active, target):
    """Mean squared masked residual with the hinge mask held fixed."""
    r = (classify(feat, filt) - target[None, None]) * active[None, None]
    return mean(square(r))


def optimize_filter(filt, feat, label, steps=5, eps=1e-8, fallback=0.1, history=None):
    """Steepest descent on the hinged classification loss of one reference sample.

    Each step freezes the hinge mask, takes g = J^T r and the exact minimiser
    along -g of the resulting quadratic, alpha = |g|^2 / |J g|^2.  Built from
    differentiable ops, so training can back-propagate through the unrolled
    steps.  ``history``, when a list, receives ``(before, after)`` frozen-mask
    losses per step.
    """
    feat, filt = as_tensor(feat), as_tensor(filt)
    z = label.z if isinstance(label, GaussianLabel) else np.asarray(label)
    k = filt.shape[2]
    b, a = filter_padding(k)
    C = feat.shape[1]
    feat_pad_t = pad2d(feat, (b, a, b, a)).transpose(1, 0, 2, 3)  # C, 1, Hp, Wp
    for _ in range(steps):
        score = classify(feat, filt)
        active, target = _masks(score.data[0, 0], z)
        r = (score - target[None, None]) * active[None, None]
        g = conv2d(feat_pad_t, r).transpose(1, 0, 2, 3)  # 1, C, k, k
        jg = classify(feat, g) * active[None, None]
        num = tsum(square(g))
        den = tsum(square(jg))
        if den.item() < eps:
            alpha = fallback
        else:
            alpha = num / (den + eps)
        new = filt - alpha * g
        if history is not None:
            before = float(np.mean(r.data ** 2))
            after = float(np.mean(((classify(feat.detach(), new.detach()).data[0, 0] - target) * active) ** 2))
            history.append((before, after))
        filt = new
    assert filt.shape == (1, C, k, k)
    return filt


class Classifier(Module):
    """Feature adaptor for the target classifier plus the filter pipeline."""

    def __init__(self, c_low, rng, cfg: HeadConfig):
        self.cfg = cfg
        self.feat_conv = Conv2d(c_low, c_low, 3, rng)

    def features(self, k_low):
        """Adapted low-level features, each sample scaled to unit mean square."""
        x = self.feat_conv(k_low)
        out = []
        for i in range(x.shape[0]):
            xi = x[i:i + 1]
            out.append(xi / sqrt(mean(square(xi)) + 1e-6))
        return out[0] if len(out) == 1 else concat(out, axis=0)

    def learn_filter(self, feat_ref, box, label, steps=None):
        """Pooled target patch, divided by its element count, then refined by steepest descent.

        The division makes the response at the target start near one (the label
        peak) on unit mean square features instead of near C k^2.
        """
        f0 = init_filter(feat_ref, box, self.cfg.filter_size, self.cfg.pool_samples)
        f0 = f0 * (1.0 / f0.size)
        steps = self.cfg.optimizer_steps if steps is None else steps
        return optimize_filter(f0, feat_ref, label, steps, self.cfg.step_eps, self.cfg.fallback_step)

    def score_map(self, feat_test, filt) -> ScoreMap:
        s = classify(feat_test, filt)
        return ScoreMap(s.data[0, 0].copy(), STRIDE_LOW, score_offset(filt.shape[2]))
