"""Finite-difference checks for every differentiable piece, from single ops to the full loss.

Each case builds random inputs from a seed, reduces the op output to a
scalar with a fixed random projection, and compares ``backward`` with
central differences.  The network cases perturb along one random direction
per parameter group, which keeps a full-model check to a handful of forward
passes while still touching every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check, no_grad
from .boxes import BBox
from .cdfi import CdfiConfig
from .heads import HeadConfig, IoURegressor, classify, label_for_box, optimize_filter
from .loss import classification_loss
from .model import ModelConfig, TrackerNet


@dataclass
class CheckResult:
    case: str
    seed: int
    max_error: float
    tolerance: float
    entries: int

    @property
    def passed(self):
        return bool(self.max_error <= self.tolerance)


def _leaf(rng, *shape, low=None, high=None, away_from_zero=False):
    if low is not None:
        data = rng.uniform(low, high, shape)
    else:
        data = rng.standard_normal(shape)
    if away_from_zero:
        data = np.sign(data) * (0.1 + np.abs(data))
    return Tensor(data, requires_grad=True)


def _project(out, rng):
    """Scalar ``sum(out * R)`` with a fixed random ``R`` so no gradient entry is trivially uniform."""
    r = Tensor(rng.standard_normal(out.shape))
    return ad.tsum(out * r)


def _op_case(build):
    """Wrap ``build(rng) -> (op, params)`` into a projected scalar objective."""

    def make(rng):
        op, params = build(rng)
        out_shape = op().shape
        r = Tensor(rng.standard_normal(out_shape))
        return (lambda: ad.tsum(op() * r)), params

    return make


def _binary(fn, b_low=None, b_high=None, a_shape=(3, 4), b_shape=(3, 4)):
    def build(rng):
        a = _leaf(rng, *a_shape)
        b = _leaf(rng, *b_shape, low=b_low, high=b_high)
        return (lambda: fn(a, b)), {"a": a, "b": b}
    return _op_case(build)


def _unary(fn, low=None, high=None, shape=(3, 4), away_from_zero=False):
    def build(rng):
        x = _leaf(rng, *shape, low=low, high=high, away_from_zero=away_from_zero)
        return (lambda: fn(x)), {"x": x}
    return _op_case(build)


def _conv(rng):
    x = _leaf(rng, 2, 3, 7, 6)
    w = _leaf(rng, 4, 3, 3, 3)
    b = _leaf(rng, 4)
    return (lambda: ad.conv2d(x, w, b, stride=2, padding=(1, 2, 0, 1))), {"x": x, "weight": w, "bias": b}


def _linear(rng):
    x, w, b = _leaf(rng, 5, 6), _leaf(rng, 3, 6), _leaf(rng, 3)
    return (lambda: ad.linear(x, w, b)), {"x": x, "weight": w, "bias": b}


def _bn(training):
    def build(rng):
        x = _leaf(rng, 3, 4, 3, 2)
        g, b = _leaf(rng, 4, low=0.5, high=1.5), _leaf(rng, 4)
        mean, var = rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)

        def op():
            state = ad.functional.BNState(4)
            state.running_mean, state.running_var = mean.copy(), var.copy()
            return ad.batch_norm(x, g, b, state, training)

        return op, {"x": x, "gamma": g, "beta": b}
    return build


def _pool(fn):
    def build(rng):
        x = _leaf(rng, 2, 3, 6, 6)
        return (lambda: fn(x)), {"x": x}
    return build


def _region_pool(rng):
    feat = _leaf(rng, 2, 3, 6, 7)
    # image-space boxes on a stride-8 map (56 x 48 pixels), away from the border clamp
    xy = rng.uniform(6, 20, (3, 2))
    wh = rng.uniform(8, 24, (3, 2))
    boxes = Tensor(np.concatenate([xy, wh], axis=1), requires_grad=True)
    bidx = np.array([0, 1, 1])
    return (lambda: ad.region_pool(feat, boxes, bidx, 3, 1.0 / 8, 2)), {"feat": feat, "boxes": boxes}


def _broadcast_channel(rng):
    x, s = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 3, 1, 1)
    return (lambda: x * s + s), {"x": x, "gate": s}


def _broadcast_scalar(rng):
    x, s = _leaf(rng, 2, 3), _leaf(rng)
    return (lambda: x * s - s / (x * x + 1.0)), {"x": x, "scalar": s}


def _getitem(rng):
    x = _leaf(rng, 4, 5)
    return (lambda: x[1:3, ::2] + x[np.array([0, 0, 3])][:, 1:4].sum()), {"x": x}


def _take(rng):
    x = _leaf(rng, 4, 3)
    return (lambda: ad.take(x, np.array([2, 0, 2, 1]), axis=0)), {"x": x}


def _concat(rng):
    a, b = _leaf(rng, 2, 3, 2), _leaf(rng, 2, 1, 2)
    return (lambda: ad.concat([a, b, a], axis=1)), {"a": a, "b": b}


OP_CASES = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, 0.5, 2.0),
    "broadcast_channel": _op_case(_broadcast_channel),
    "broadcast_scalar": _op_case(_broadcast_scalar),
    "scale": _unary(lambda x: ad.scale(x, -2.5)),
    "sigmoid": _unary(ad.sigmoid),
    "relu": _unary(ad.relu, away_from_zero=True),
    "exp": _unary(ad.exp),
    "sqrt": _unary(ad.sqrt, 0.5, 2.0),
    "square": _unary(ad.square),
    "sum": _unary(lambda x: ad.tsum(x, axis=1)),
    "mean": _unary(lambda x: ad.mean(x, axis=0, keepdims=True)),
    "reshape": _unary(lambda x: ad.reshape(x, (2, 6))),
    "transpose": _unary(lambda x: ad.transpose(x, (2, 0, 1)), shape=(2, 3, 4)),
    "concat": _op_case(_concat),
    "getitem": _op_case(_getitem),
    "take": _op_case(_take),
    "pad2d": _unary(lambda x: ad.pad2d(x, (1, 0, 2, 1)), shape=(1, 2, 3, 3)),
    "conv2d": _op_case(_conv),
    "linear": _op_case(_linear),
    "batch_norm_train": _op_case(_bn(True)),
    "batch_norm_eval": _op_case(_bn(False)),
    "adaptive_avg_pool": _op_case(_pool(ad.adaptive_avg_pool_1x1)),
    "avg_pool2d": _op_case(_pool(lambda x: ad.avg_pool2d(x, 2))),
    "max_pool2d": _op_case(_pool(lambda x: ad.max_pool2d(x, 2))),
    "region_pool": _op_case(_region_pool),
}


def check_op(name, seed, tolerance=1e-4, h=1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    fn, params = OP_CASES[name](rng)
    report = grad_check(fn, params, h=h, tolerance=tolerance)
    return CheckResult(name, seed, report.max_error, tolerance, sum(report.checked.values()))


# ---------------------------------------------------------------- network pieces


def directional_error(fn, params, rng, h=1e-6, tolerance=1e-4, shrink=3):
    """Relative error between ``grad . v`` and the central difference along random ``v``.

    A ReLU or max kink inside ``[-h, h]`` spoils the difference without any
    gradient being wrong.  Such a crossing shows up as disagreement between the
    estimates at ``h`` and ``h / 2`` (smooth functions agree to O(h^2)), so the
    step is cut tenfold until they agree.  The analytic value plays no part in
    choosing the step.
    """
    for p in params:
        p.grad = None
    fn().backward()
    dirs = [rng.standard_normal(p.shape) for p in params]
    analytic = sum(float(np.sum((p.grad if p.grad is not None else 0.0) * v)) for p, v in zip(params, dirs))
    originals = [p.data.copy() for p in params]

    def central(step):
        values = []
        with no_grad():
            for sign in (1.0, -1.0):
                for p, v, o in zip(params, dirs, originals):
                    p.data = o + sign * step * v
                values.append(fn().item())
        return (values[0] - values[1]) / (2 * step)

    try:
        for _ in range(shrink + 1):
            coarse, numeric = central(h), central(h / 2)
            if abs(coarse - numeric) <= tolerance * max(abs(coarse), abs(numeric), 1e-10):
                break
            h /= 10
    finally:
        for p, o in zip(params, originals):
            p.data = o
    scale = max(abs(analytic), abs(numeric))
    return 0.0 if scale < 1e-10 else abs(analytic - numeric) / scale


def _toy_regressor(rng):
    cfg = HeadConfig(iou_pool_low=3, iou_pool_high=2)
    reg = IoURegressor(4, 8, rng, cfg)
    k_low = Tensor(rng.standard_normal((2, 4, 6, 6)), requires_grad=True)
    k_high = Tensor(rng.standard_normal((2, 8, 3, 3)), requires_grad=True)
    ref = Tensor(np.array([[10.0, 12.0, 20.0, 18.0], [14.0, 9.0, 16.0, 22.0]]))
    xy = rng.uniform(6, 20, (4, 2))
    wh = rng.uniform(10, 24, (4, 2))
    boxes = Tensor(np.concatenate([xy, wh], axis=1), requires_grad=True)
    bidx = np.array([0, 0, 1, 1])
    target = rng.uniform(0.2, 0.9, 4)

    def fn():
        mod = reg.compute_modulation(k_low, k_high, ref)
        pred = reg.predict_iou(k_low, k_high, mod, boxes, bidx)
        return ad.tsum(ad.square(pred - target))

    return reg, fn, {"boxes": boxes, "k_low": k_low, "k_high": k_high}


def check_predict_iou(seed, tolerance=1e-4, h=1e-6) -> CheckResult:
    """Exact entry-wise check on boxes and features, directional check on regressor weights."""
    rng = np.random.default_rng(seed)
    reg, fn, inputs = _toy_regressor(rng)
    report = grad_check(fn, inputs, h=h, tolerance=tolerance)
    err = max(report.max_error, directional_error(fn, reg.parameters(), rng, h, tolerance))
    return CheckResult("predict_iou", seed, err, tolerance, sum(report.checked.values()) + 1)


def check_filter_optimizer(seed, tolerance=1e-4, h=1e-6) -> CheckResult:
    """Back-propagation through the unrolled steepest-descent filter optimiser."""
    rng = np.random.default_rng(seed)
    feat_ref = Tensor(rng.standard_normal((1, 3, 6, 6)), requires_grad=True)
    feat_test = Tensor(rng.standard_normal((1, 3, 6, 6)), requires_grad=True)
    filt0 = Tensor(0.1 * rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
    box = BBox(14.0, 12.0, 20.0, 18.0)
    label = label_for_box(box, (6, 6))
    test_label = label_for_box(BBox(18.0, 16.0, 20.0, 18.0), (6, 6))

    def fn():
        filt = optimize_filter(filt0, feat_ref, label, steps=3)
        return classification_loss(classify(feat_test, filt), test_label)

    report = grad_check(fn, {"feat_ref": feat_ref, "feat_test": feat_test, "filter": filt0}, h=h, tolerance=tolerance)
    return CheckResult("filter_optimizer", seed, report.max_error, tolerance, sum(report.checked.values()))


def toy_composite(seed, size=32, low=4, high=8, n_bins=2):
    """A tiny model plus a two-pair batch, for whole-network gradient checks."""
    from .training import Batch, forward_losses

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(CdfiConfig(n_bins=n_bins, low_channels=low, high_channels=high, seed=seed),
                      HeadConfig(optimizer_steps=2))
    model = TrackerNet(cfg).train()
    B = 2
    frames = rng.uniform(0, 1, (2 * B, 1, size, size))
    events = rng.choice([0.0, 127 / 255, 1.0], (2 * B, n_bins, 1, size, size), p=[0.1, 0.8, 0.1])
    ref = np.array([[8.0, 9.0, 12.0, 10.0], [11.0, 7.0, 10.0, 14.0]])
    test = ref + rng.uniform(-2, 2, ref.shape) * [1, 1, 0, 0]
    K = 3
    cands = np.repeat(test, K, axis=0) + rng.uniform(-1.5, 1.5, (B * K, 4)) * [1, 1, 0.5, 0.5]
    targets = rng.uniform(0.3, 0.95, B * K)
    batch = Batch(frames, events, ref, test, cands, np.repeat(np.arange(B), K), targets)

    def fn():
        return forward_losses(model, batch, beta=1.0)[0]

    return model, fn


def check_composite(seed, tolerance=1e-4, h=1e-6) -> list[CheckResult]:
    """Directional checks of the total loss, one per top-level sub-module."""
    model, fn = toy_composite(seed)
    rng = np.random.default_rng(seed + 10_000)
    groups = {"all": model.parameters()}
    for name, sub in [("cdfi." + n, getattr(model.cdfi, n)) for n in ("ffe", "efe", "cdms_low", "cdms_high")] + [
        ("regressor", model.regressor), ("classifier", model.classifier)
    ]:
        if sub is not None:
            groups[name] = sub.parameters()
    return [
        CheckResult(f"composite[{name}]", seed, directional_error(fn, params, rng, h, tolerance), tolerance, len(params))
        for name, params in groups.items()
    ]


def run_suite(seeds=range(20), tolerance=1e-4, composite=True, progress=None) -> list[CheckResult]:
    results = []
    for seed in seeds:
        batch = [check_op(name, seed, tolerance) for name in OP_CASES]
        batch.append(check_predict_iou(seed, tolerance))
        batch.append(check_filter_optimizer(seed, tolerance))
        if composite:
            batch.extend(check_composite(seed, tolerance))
        results.extend(batch)
        if progress is not None:
            progress(seed, batch)
    return results


def summary_table(results: list[CheckResult]) -> str:
    """One row per case: seeds run, worst error over seeds, verdict."""
    cases = {}
    for r in results:
        cases.setdefault(r.case, []).append(r)
    width = max(len(c) for c in cases)
    lines = [f"{'case':<{width}}  seeds  max_rel_err  ok"]
    for case, rs in cases.items():
        worst = max(r.max_error for r in rs)
        ok = "yes" if all(r.passed for r in rs) else "NO"
        lines.append(f"{case:<{width}}  {len(rs):>5}  {worst:11.3e}  {ok}")
    return "\n".join(lines)
