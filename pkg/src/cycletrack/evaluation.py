"""One-pass tracking and OTB/TrackingNet-style metrics."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .cycle import clamp_degenerate, Counters
from .dca import ContextTokens
from .geometry import BBox, SEARCH_FACTOR, TEMPLATE_FACTOR, boxes_to_frame, crop_batch
from .model import HopMeta

AUC_THRESHOLDS = np.linspace(0.0, 1.0, 101)
NORM_THRESHOLDS = np.linspace(0.0, 0.5, 51)
IOU_TOL = 1e-9


@dataclass
class TrackResult:
    boxes: list                     # BBox per frame after the first
    times: list = field(default_factory=list)
    degenerate_boxes: int = 0

    @property
    def fps(self):
        total = sum(self.times)
        return len(self.times) / total if total > 0 else float("nan")


@dataclass
class MetricsReport:
    auc: float
    precision: float
    norm_precision: float
    fps: float
    mean_iou: float
    sequences: dict = field(default_factory=dict)
    attributes: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "auc": self.auc, "precision": self.precision, "norm_precision": self.norm_precision,
            "mean_iou": self.mean_iou, "fps": self.fps,
            "sequences": self.sequences, "attributes": self.attributes,
        }


def _frame_tensor(frame):
    return torch.from_numpy(np.ascontiguousarray(frame)).permute(2, 0, 1).unsqueeze(0).float()


@torch.no_grad()
def track(model, sequence, template_factor=TEMPLATE_FACTOR, search_factor=SEARCH_FACTOR) -> TrackResult:
    """Track ``sequence`` from its first annotation without any context tokens."""
    model.eval()
    cfg = model.cfg
    frames = sequence.frames
    result = TrackResult([])
    if len(frames) < 2:
        return result
    counters = Counters()
    y0 = sequence.first_annotation.as_tensor().unsqueeze(0)
    template, _, _ = crop_batch(_frame_tensor(frames[0]), y0, template_factor, cfg.template_res)
    prev = y0
    empty = ContextTokens.empty()
    for i in range(1, len(frames)):
        t0 = time.perf_counter()
        search, centers, sides = crop_batch(_frame_tensor(frames[i]), prev, search_factor, cfg.search_res)
        out = model.hop(template, search, empty, HopMeta([sequence.name], [i], centers, sides))
        box = boxes_to_frame(out.box.to(torch.float64), centers, sides)
        prev = clamp_degenerate(box, counters)
        result.times.append(time.perf_counter() - t0)
        result.boxes.append(BBox(*(float(v) for v in prev[0])))
    result.degenerate_boxes = counters.degenerate_boxes
    return result


def _as_array(boxes):
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64).reshape(-1, 4)
    return np.array([b.astuple() if isinstance(b, BBox) else tuple(b) for b in boxes],
                    dtype=np.float64).reshape(-1, 4)


def _check(results, gt):
    r, g = _as_array(results), _as_array(gt)
    if len(r) != len(g):
        raise ValueError(f"{len(r)} predictions for {len(g)} ground-truth boxes")
    return r, g


def frame_ious(results, gt) -> np.ndarray:
    r, g = _check(results, gt)
    r0, r1 = r[:, :2] - r[:, 2:] / 2, r[:, :2] + r[:, 2:] / 2
    g0, g1 = g[:, :2] - g[:, 2:] / 2, g[:, :2] + g[:, 2:] / 2
    inter = np.prod(np.clip(np.minimum(r1, g1) - np.maximum(r0, g0), 0, None), axis=1)
    # areas from the same corners, so identical boxes give exactly 1
    union = np.prod(r1 - r0, axis=1) + np.prod(g1 - g0, axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def success_curve(results, gt) -> np.ndarray:
    ious = frame_ious(results, gt)
    # crop-space round trips cost a few ulps; do not let that fail the tau=1 bin
    return (ious[None, :] + IOU_TOL >= AUC_THRESHOLDS[:, None]).mean(axis=1)


def success_auc(results, gt) -> float:
    """Mean over 101 thresholds in [0, 1] of the fraction of frames with IoU >= threshold."""
    return float(success_curve(results, gt).mean())


def center_errors(results, gt) -> np.ndarray:
    r, g = _check(results, gt)
    return np.linalg.norm(r[:, :2] - g[:, :2], axis=1)


def precision(results, gt, threshold_px=20.0) -> float:
    return float((center_errors(results, gt) <= threshold_px).mean())


def precision_curve(results, gt, max_px=50):
    thresholds = np.arange(0, max_px + 1)
    err = center_errors(results, gt)
    return thresholds, (err[None, :] <= thresholds[:, None]).mean(axis=1)


def norm_precision_curve(results, gt) -> np.ndarray:
    r, g = _check(results, gt)
    err = np.linalg.norm((r[:, :2] - g[:, :2]) / g[:, 2:], axis=1)
    return (err[None, :] <= NORM_THRESHOLDS[:, None]).mean(axis=1)


def norm_precision(results, gt) -> float:
    """Area under the size-normalized precision curve over [0, 0.5] (51 thresholds)."""
    return float(norm_precision_curve(results, gt).mean())


def evaluate(model, sequences, results_dir=None) -> MetricsReport:
    """Track every sequence and aggregate metrics over all tracked frames.

    Frame 0 carries the initial annotation and is excluded from the scores.
    """
    all_pred, all_gt, times = [], [], []
    per_seq, per_attr = {}, {}
    for seq in sequences:
        if seq.full_annotations is None:
            raise ValueError(f"sequence {seq.name} has no full annotations to score against")
        res = track(model, seq)
        times.extend(res.times)
        gt = seq.full_annotations[1:]
        if results_dir is not None:
            lines = [",".join(f"{v:.4f}" for v in b.to_xywh()) for b in [seq.first_annotation] + res.boxes]
            (results_dir / f"{seq.name}.txt").write_text("\n".join(lines) + "\n")
        if not gt:
            continue
        all_pred.extend(res.boxes)
        all_gt.extend(gt)
        per_seq[seq.name] = {
            "auc": success_auc(res.boxes, gt), "precision": precision(res.boxes, gt),
            "norm_precision": norm_precision(res.boxes, gt),
            "mean_iou": float(frame_ious(res.boxes, gt).mean()),
            "degenerate_boxes": res.degenerate_boxes,
        }
        for tag in sorted(seq.attributes):
            per_attr.setdefault(tag, ([], []))
            per_attr[tag][0].extend(res.boxes)
            per_attr[tag][1].extend(gt)
    attrs = {tag: {"auc": success_auc(p, g), "precision": precision(p, g), "frames": len(p)}
             for tag, (p, g) in per_attr.items()}
    total = sum(times)
    return MetricsReport(
        auc=success_auc(all_pred, all_gt),
        precision=precision(all_pred, all_gt),
        norm_precision=norm_precision(all_pred, all_gt),
        fps=len(times) / total if total > 0 else float("nan"),
        mean_iou=float(np.mean([s["mean_iou"] for s in per_seq.values()])) if per_seq else float("nan"),
        sequences=per_seq,
        attributes=attrs,
    )
