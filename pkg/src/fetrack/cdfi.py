"""Cross-domain feature integrator: frame and event extractors plus attention-based fusion.

Both extractors emit a low-level map at stride 8 and a high-level map at
stride 16.  Fusion happens per level in a :class:`CDMS` block: each domain is
re-weighted by self- and cross-domain attention gates, then the two enhanced
maps are mixed with learned per-channel weights.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .aggregation import LATEST, channels_for
from .autodiff import (
    Conv2d,
    ConvBNReLU,
    Module,
    Parameter,
    Tensor,
    adaptive_avg_pool_1x1,
    as_tensor,
    concat,
    sigmoid,
    tsum,
)
from .errors import ConfigError, ShapeError

INPUT_MODES = ("fused", "frame_only", "event_only", "concat_to_frame", "concat_to_event")
STRIDE_LOW = 8
STRIDE_HIGH = 16


@dataclass
class CdfiConfig:
    n_bins: int = 3
    low_channels: int = 64
    high_channels: int = 128
    input_height: int | None = None
    input_width: int | None = None
    use_eab: bool = True
    use_cdms: bool = True
    use_self_attention: bool = True
    use_cross_attention: bool = True
    use_adaptive_weighting: bool = True
    input_mode: str = "fused"
    fixed_branch_weights: bool = False
    aggregation: str = LATEST
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @classmethod
    def toy(cls, **overrides):
        return cls(**{"low_channels": 16, "high_channels": 32, **overrides})

    def validate(self):
        if not (isinstance(self.n_bins, int) and self.n_bins >= 1):
            raise ConfigError(f"n_bins must be a positive integer, got {self.n_bins!r}")
        if self.low_channels < 1 or self.high_channels < 1:
            raise ConfigError("channel widths must be positive")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        channels_for(self.aggregation)

    @property
    def event_channels(self):
        return channels_for(self.aggregation)

    @property
    def uses_frames(self):
        return self.input_mode != "event_only"

    @property
    def uses_events(self):
        return self.input_mode != "frame_only"


@dataclass
class FeatureLevels:
    low: Tensor
    high: Tensor


@dataclass
class FusedFeatures:
    low: Tensor
    high: Tensor
    weights: dict = field(default_factory=dict)  # diagnostic mean adaptive weights per level


class FrameFeatureExtractor(Module):
    """Five conv stages, strides 1-2-2-2-2; taps after the 4th (stride 8) and 5th (stride 16)."""

    def __init__(self, cin, c_low, c_high, rng):
        c0, c1 = max(4, c_low // 4), max(4, c_low // 2)
        self.stem = ConvBNReLU(cin, c0, 3, rng)
        self.stage1 = ConvBNReLU(c0, c1, 3, rng, stride=2)
        self.stage2 = ConvBNReLU(c1, c_low, 3, rng, stride=2)
        self.stage3 = ConvBNReLU(c_low, c_low, 3, rng, stride=2)
        self.stage4 = ConvBNReLU(c_low, c_high, 3, rng, stride=2)

    def forward(self, image):
        _check_divisible(image)
        x = self.stage2(self.stage1(self.stem(image)))
        low = self.stage3(x)
        return FeatureLevels(low, self.stage4(low))


class EdgeAttention(Module):
    """Gate a feature map by a spatial map computed from its channel-attended sum.

    The summed map has one channel; the 1x1 convolution lifts it to one gate
    per input channel so the final product needs no spatial broadcast.
    """

    def __init__(self, channels, rng):
        self.conv = Conv2d(1, channels, 1, rng)

    def forward(self, kappa):
        kappa_m = sigmoid(adaptive_avg_pool_1x1(kappa)) * kappa
        summed = tsum(kappa_m, axis=1, keepdims=True)
        return sigmoid(self.conv(summed)) * kappa


class EventBranch(Module):
    """Sub-branch for one temporal bin: four stride-2 convs, attention after the 3rd and 4th."""

    def __init__(self, cin, c_low, c_high, rng, use_eab=True):
        c1 = max(4, c_low // 2)
        self.conv1 = ConvBNReLU(cin, c1, 3, rng, stride=2)
        self.conv2 = ConvBNReLU(c1, c_low, 3, rng, stride=2)
        self.conv3 = ConvBNReLU(c_low, c_low, 3, rng, stride=2)
        self.conv4 = ConvBNReLU(c_low, c_high, 3, rng, stride=2)
        self.eab_low = EdgeAttention(c_low, rng) if use_eab else None
        self.eab_high = EdgeAttention(c_high, rng) if use_eab else None

    def forward(self, x):
        k = self.conv3(self.conv2(self.conv1(x)))
        e_low = self.eab_low(k) if self.eab_low is not None else k
        k = self.conv4(e_low)
        e_high = self.eab_high(k) if self.eab_high is not None else k
        return FeatureLevels(e_low, e_high)


class EventFeatureExtractor(Module):
    """One :class:`EventBranch` per bin, fused by a learned weighted sum per level."""

    def __init__(self, n_bins, cin, c_low, c_high, rng, use_eab=True, fixed_weights=False):
        self.n_bins = n_bins
        self.branches = [EventBranch(cin, c_low, c_high, rng, use_eab) for _ in range(n_bins)]
        if fixed_weights:
            self.weights_low = self.weights_high = None
        else:
            self.weights_low = Parameter(np.full(n_bins, 1.0 / n_bins))
            self.weights_high = Parameter(np.full(n_bins, 1.0 / n_bins))

    def branch_outputs(self, events):
        """``events`` is (N, n_bins, C, H, W) in unit scale."""
        events = as_tensor(events)
        if events.ndim != 5 or events.shape[1] != self.n_bins:
            raise ConfigError(f"expected {self.n_bins} aggregated bins, got tensor of shape {events.shape}")
        _check_divisible(events)
        return [branch(events[:, i]) for i, branch in enumerate(self.branches)]

    def weight(self, level, i):
        w = self.weights_low if level == "low" else self.weights_high
        return 1.0 if w is None else w[i]

    def forward(self, events):
        outs = self.branch_outputs(events)
        low = high = None
        for i, o in enumerate(outs):
            wl, wh = self.weight("low", i) * o.low, self.weight("high", i) * o.high
            low = wl if low is None else low + wl
            high = wh if high is None else high + wh
        return FeatureLevels(low, high)


class CrossAttention(Module):
    """Enhance ``d1`` with a self gate from ``d1`` and a cross gate from ``d2``: d1 (1 + g_self + g_cross)."""

    def __init__(self, channels, rng, use_self=True, use_cross=True):
        self.self_conv = Conv2d(channels, channels, 3, rng) if use_self else None
        if use_cross:
            self.cross1 = ConvBNReLU(channels, channels, 1, rng)
            self.cross3 = ConvBNReLU(channels, channels, 3, rng)
            self.cross5 = ConvBNReLU(channels, channels, 5, rng)
            self.cross_fuse = Conv2d(3 * channels, channels, 1, rng)
        else:
            self.cross1 = self.cross3 = self.cross5 = self.cross_fuse = None

    def gates(self, d1, d2):
        g_self = sigmoid(self.self_conv(d1)) if self.self_conv is not None else None
        g_cross = None
        if self.cross_fuse is not None:
            multi = concat([self.cross1(d2), self.cross3(d2), self.cross5(d2)], axis=1)
            g_cross = sigmoid(self.cross_fuse(multi))
        return g_self, g_cross

    def forward(self, d1, d2):
        if d1.shape != d2.shape:
            raise ShapeError(f"cross attention operands differ: {d1.shape} vs {d2.shape}")
        g_self, g_cross = self.gates(d1, d2)
        out = d1
        if g_self is not None:
            out = out + g_self * d1
        if g_cross is not None:
            out = out + g_cross * d1
        return out


class AdaptiveWeight(Module):
    """Per-channel domain weight in (0, 1) from globally pooled features."""

    def __init__(self, channels, rng):
        self.squeeze = ConvBNReLU(channels, channels, 1, rng)
        self.excite = Conv2d(channels, channels, 1, rng)

    def forward(self, t):
        return sigmoid(self.excite(self.squeeze(adaptive_avg_pool_1x1(t))))


class CDMS(Module):
    """Cross-domain modulation and selection for one feature level."""

    def __init__(self, channels, rng, use_self=True, use_cross=True, use_weighting=True):
        self.cab_frame = CrossAttention(channels, rng, use_self, use_cross)
        self.cab_event = CrossAttention(channels, rng, use_self, use_cross)
        self.weight_frame = AdaptiveWeight(channels, rng) if use_weighting else None
        self.weight_event = AdaptiveWeight(channels, rng) if use_weighting else None

    def forward(self, f, e):
        if f.shape != e.shape:
            raise ShapeError(f"frame and event features differ: {f.shape} vs {e.shape}")
        t_f = self.cab_frame(f, e)
        t_e = self.cab_event(e, f)
        if self.weight_frame is None:
            return t_f + t_e, {"w_f": 1.0, "w_e": 1.0}
        w_f, w_e = self.weight_frame(t_f), self.weight_event(t_e)
        diag = {"w_f": float(w_f.data.mean()), "w_e": float(w_e.data.mean())}
        return w_f * t_f + w_e * t_e, diag


class CDFI(Module):
    def __init__(self, config: CdfiConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        cl, ch, n, ech = config.low_channels, config.high_channels, config.n_bins, config.event_channels
        mode = config.input_mode
        self.ffe = self.efe = self.cdms_low = self.cdms_high = None
        if mode in ("fused", "frame_only"):
            self.ffe = FrameFeatureExtractor(1, cl, ch, rng)
        elif mode == "concat_to_frame":
            self.ffe = FrameFeatureExtractor(1 + n * ech, cl, ch, rng)
        if mode in ("fused", "event_only", "concat_to_event"):
            cin = ech + (1 if mode == "concat_to_event" else 0)
            self.efe = EventFeatureExtractor(n, cin, cl, ch, rng, config.use_eab, config.fixed_branch_weights)
        if mode == "fused" and config.use_cdms:
            flags = (config.use_self_attention, config.use_cross_attention, config.use_adaptive_weighting)
            self.cdms_low = CDMS(cl, rng, *flags)
            self.cdms_high = CDMS(ch, rng, *flags)

    def forward(self, frame, events):
        """``frame`` (N, 1, H, W) and ``events`` (N, n_bins, C, H, W), both unit-scaled."""
        mode = self.config.input_mode
        frame = as_tensor(frame) if frame is not None else None
        events = as_tensor(events) if events is not None else None
        if mode == "frame_only":
            f = self.ffe(frame)
            return FusedFeatures(f.low, f.high)
        if mode == "event_only":
            e = self.efe(events)
            return FusedFeatures(e.low, e.high)
        if mode == "concat_to_frame":
            N, n, C, H, W = events.shape
            f = self.ffe(concat([frame, events.reshape(N, n * C, H, W)], axis=1))
            return FusedFeatures(f.low, f.high)
        if mode == "concat_to_event":
            N, n, C, H, W = events.shape
            stacked = concat([events, concat([frame.reshape(N, 1, 1, H, W)] * n, axis=1)], axis=2)
            e = self.efe(stacked)
            return FusedFeatures(e.low, e.high)
        f = self.ffe(frame)
        e = self.efe(events)
        if self.cdms_low is None:
            return FusedFeatures(f.low + e.low, f.high + e.high)
        k_low, d_low = self.cdms_low(f.low, e.low)
        k_high, d_high = self.cdms_high(f.high, e.high)
        return FusedFeatures(k_low, k_high, {"low": d_low, "high": d_high})


def _check_divisible(x):
    H, W = x.shape[-2:]
    if H % STRIDE_HIGH or W % STRIDE_HIGH:
        raise ShapeError(f"input {W}x{H} is not divisible by {STRIDE_HIGH}; pad first")


def pad_to_multiple(image: np.ndarray, multiple=STRIDE_HIGH, value=0):
    """Pad the last two axes on the bottom/right so both are multiples of ``multiple``."""
    H, W = image.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    if not (ph or pw):
        return image
    width = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, width, constant_values=value)


def config_to_json(config) -> str:
    return json.dumps(asdict(config), indent=2, sort_keys=True)


def config_from_dict(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)
