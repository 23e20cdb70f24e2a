"""One-pass evaluation: IoU, centre error, success/precision curves, RSR, RPR, OP_T.

Success counts IoU strictly above each threshold, precision counts centre
errors at or within each distance.  Frame 0 (initialisation) is excluded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import BBox, box_iou
from .errors import BoxError, DataError

SUCCESS_THRESHOLDS = np.round(np.linspace(0.0, 1.0, 101), 2)
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
RPR_DISTANCE = 20
GRID_NOTE = {
    "success_thresholds": "0:0.01:1 (101), IoU > tau",
    "precision_thresholds": "0:1:50 px (51), error <= d",
    "rpr_distance_px": RPR_DISTANCE,
    "frame0_excluded": True,
}


def _checked(box) -> np.ndarray:
    a = box.as_array() if isinstance(box, BBox) else np.asarray(box, dtype=np.float64)
    if not (a[..., 2] > 0).all() or not (a[..., 3] > 0).all():
        raise BoxError("boxes need positive width and height")
    return a


def iou(a, b) -> float:
    return float(box_iou(_checked(a), _checked(b)))


def center_error(a, b) -> float:
    a, b = _checked(a), _checked(b)
    return float(np.hypot(a[0] + a[2] / 2 - b[0] - b[2] / 2, a[1] + a[3] / 2 - b[1] - b[3] / 2))


def success_curve(ious) -> np.ndarray:
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise DataError("success curve of an empty sequence")
    return (ious[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)


def rsr(ious) -> float:
    """Mean of the success curve, as one division of integer counts so it is exactly rounded."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise DataError("success curve of an empty sequence")
    hits = int((ious[None, :] > SUCCESS_THRESHOLDS[:, None]).sum())
    return hits / (len(SUCCESS_THRESHOLDS) * ious.size)


def precision_curve(errors) -> np.ndarray:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise DataError("precision curve of an empty sequence")
    return (errors[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)


def rpr(errors) -> float:
    return float(precision_curve(errors)[RPR_DISTANCE])


def op_t(ious, T) -> float:
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise DataError("overlap precision of an empty sequence")
    return float((ious > T).mean())


@dataclass
class SequenceEval:
    name: str
    ious: np.ndarray
    errors: np.ndarray
    attributes: list = field(default_factory=list)

    @property
    def success(self):
        return success_curve(self.ious)

    @property
    def precision(self):
        return precision_curve(self.errors)

    def summary(self):
        return {
            "rsr": rsr(self.ious),
            "rpr": float(self.precision[RPR_DISTANCE]),
            "op50": op_t(self.ious, 0.5),
            "op75": op_t(self.ious, 0.75),
            "mean_iou": float(self.ious.mean()),
            "frames": int(self.ious.size),
        }


def evaluate_sequence(predictions, gt, name="", attributes=()) -> SequenceEval:
    """``predictions`` and ``gt`` map frame index to BBox; frame 0 is skipped."""
    pred_idx = sorted(i for i in predictions if i != 0)
    gt_idx = sorted(i for i in (gt.indices() if hasattr(gt, "indices") else gt) if i != 0)
    if pred_idx != gt_idx:
        missing = sorted(set(gt_idx) - set(pred_idx))[:5]
        extra = sorted(set(pred_idx) - set(gt_idx))[:5]
        raise DataError(f"{name or 'sequence'}: prediction/ground-truth frames differ (missing {missing}, extra {extra})")
    if not gt_idx:
        raise DataError(f"{name or 'sequence'}: nothing to evaluate after frame 0")
    p = np.array([_checked(predictions[i]) for i in gt_idx])
    g = np.array([_checked(gt[i]) for i in gt_idx])
    ious = box_iou(p, g)
    errors = np.hypot(p[:, 0] + p[:, 2] / 2 - g[:, 0] - g[:, 2] / 2, p[:, 1] + p[:, 3] / 2 - g[:, 1] - g[:, 3] / 2)
    return SequenceEval(name, ious, errors, list(attributes))


def _mean_summary(evals):
    keys = ("rsr", "rpr", "op50", "op75", "mean_iou")
    rows = [e.summary() for e in evals]
    return {k: float(np.mean([r[k] for r in rows])) for k in keys} | {"sequences": len(rows)}


def evaluate(evals: list[SequenceEval], extra=None) -> dict:
    """Report dict: overall means over sequences, per-sequence and per-attribute aggregates."""
    if not evals:
        raise DataError("no sequences to evaluate")
    report = _mean_summary(evals)
    report["per_sequence"] = {e.name: e.summary() for e in evals}
    groups = {}
    for e in evals:
        for a in e.attributes:
            groups.setdefault(a, []).append(e)
    report["per_attribute"] = {a: _mean_summary(g) for a, g in sorted(groups.items())}
    report["protocol"] = dict(GRID_NOTE)
    if extra:
        report.update(extra)
    return report


def write_report(path, report):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def write_curves_csv(path, evals: list[SequenceEval]):
    """Mean success and precision curves over sequences, one threshold per row."""
    succ = np.mean([e.success for e in evals], axis=0)
    prec = np.mean([e.precision for e in evals], axis=0)
    lines = ["curve,threshold,value"]
    lines += [f"success,{t:.2f},{float(v)!r}" for t, v in zip(SUCCESS_THRESHOLDS, succ)]
    lines += [f"precision,{int(d)},{float(v)!r}" for d, v in zip(PRECISION_THRESHOLDS, prec)]
    Path(path).write_text("\n".join(lines) + "\n")
