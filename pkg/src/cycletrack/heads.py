"""Center-style prediction heads, box decoding and the training loss."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .geometry import box_iou_giou

PRIOR_LOGIT = -2.19  # sigmoid(-2.19) ~ 0.1, the usual center-head prior
PROB_EPS = 1e-12


@dataclass
class PredictionMaps:
    cls: torch.Tensor     # (B, H, W) in [0, 1]
    offset: torch.Tensor  # (B, 2, H, W) sub-cell (x, y) offsets
    size: torch.Tensor    # (B, 2, H, W) normalized (w, h)


@dataclass
class LossWeights:
    lambda1: float = 5.0
    lambda2: float = 2.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossTerms:
    total: torch.Tensor
    cls: torch.Tensor
    l1: torch.Tensor
    giou: torch.Tensor
    invisible: int = 0

    def as_floats(self):
        return {"loss": float(self.total.detach()), "loss_cls": float(self.cls.detach()),
                "loss_l1": float(self.l1.detach()), "loss_giou": float(self.giou.detach())}


def _branch(dim, hidden, out):
    return nn.Sequential(
        nn.Conv2d(dim, hidden, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(hidden, hidden, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(hidden, out, 1),
    )


class CenterHead(nn.Module):
    def __init__(self, dim, feat_size, hidden=64):
        super().__init__()
        self.feat_size = feat_size
        self.cls = _branch(dim, hidden, 1)
        self.offset = _branch(dim, hidden, 2)
        self.size = _branch(dim, hidden, 2)
        nn.init.constant_(self.cls[-1].bias, PRIOR_LOGIT)

    def forward(self, f_x: torch.Tensor) -> PredictionMaps:
        b, n, d = f_x.shape
        s = self.feat_size
        if n != s * s:
            raise ValueError(f"expected {s * s} search tokens, got {n}")
        grid = f_x.transpose(1, 2).reshape(b, d, s, s)
        return PredictionMaps(
            cls=torch.sigmoid(self.cls(grid)).squeeze(1),
            offset=torch.sigmoid(self.offset(grid)),
            size=torch.sigmoid(self.size(grid)),
        )

    predict = forward


def peak_index(cls: torch.Tensor) -> torch.Tensor:
    """Flat argmax per sample; ties go to the smallest row-major index."""
    return cls.detach().flatten(1).argmax(dim=1)


def decode_box(maps: PredictionMaps) -> torch.Tensor:
    """Boxes ``(B, 4)`` in crop-normalized center-size form.

    Gradients reach the offset and size maps at the peak cell only.
    """
    b, h, w = maps.cls.shape
    idx = peak_index(maps.cls)
    row = torch.div(idx, w, rounding_mode="floor")
    col = idx % w
    ar = torch.arange(b)
    off = maps.offset.flatten(2)[ar, :, idx]
    size = maps.size.flatten(2)[ar, :, idx]
    cx = (col.to(off.dtype) + off[:, 0]) / w
    cy = (row.to(off.dtype) + off[:, 1]) / h
    return torch.stack([cx, cy, size[:, 0], size[:, 1]], dim=-1)


def gaussian_target(boxes: torch.Tensor, feat_size: int, sigma: float = 1.0) -> torch.Tensor:
    """Unit-peak Gaussian splat at the grid cell holding each box center."""
    cells = (boxes[:, :2] * feat_size).floor().clamp(0, feat_size - 1)
    grid = torch.arange(feat_size, dtype=boxes.dtype)
    dx = grid.view(1, 1, -1) - cells[:, 0].view(-1, 1, 1)
    dy = grid.view(1, -1, 1) - cells[:, 1].view(-1, 1, 1)
    return torch.exp(-(dx ** 2 + dy ** 2) / (2 * sigma ** 2))


def focal_loss(cls: torch.Tensor, target: torch.Tensor, alpha: float = 2.0, beta: float = 4.0,
               reduction: str = "mean") -> torch.Tensor:
    """Penalty-reduced focal loss, normalized by the positives of each sample.

    ``cls`` and ``target`` are ``(B, H, W)`` or a single ``(H, W)`` map.
    ``reduction="none"`` returns one value per sample.
    """
    if cls.dim() == 2:
        cls, target = cls.unsqueeze(0), target.unsqueeze(0)
    pos = target.eq(1).to(cls.dtype)
    num_pos = pos.flatten(1).sum(1)
    if bool((num_pos == 0).any()):
        raise ValueError("focal loss target has no positive cell")
    p = cls.clamp(PROB_EPS, 1 - PROB_EPS)
    pos_term = torch.log(p) * (1 - p) ** alpha * pos
    neg_term = torch.log(1 - p) * p ** alpha * (1 - target) ** beta * (1 - pos)
    per_sample = -(pos_term + neg_term).flatten(1).sum(1) / num_pos
    if reduction == "none":
        return per_sample
    return per_sample.mean()


def l1_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return (pred - gt).abs().mean(-1)


def giou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return 1 - box_iou_giou(pred, gt)[1]


def total_loss(pred_box, gt_box, cls, target, weights: LossWeights = None,
               visible: torch.Tensor | None = None) -> LossTerms:
    """``focal + lambda1 * L1 + lambda2 * (1 - GIoU)``, averaged over visible samples.

    Samples flagged invisible contribute nothing and are counted in
    ``LossTerms.invisible``.
    """
    weights = weights or LossWeights()
    if pred_box.dim() == 1:
        pred_box, gt_box = pred_box.unsqueeze(0), gt_box.unsqueeze(0)
        cls, target = cls.unsqueeze(0), target.unsqueeze(0)
    if visible is None:
        visible = torch.ones(pred_box.shape[0], dtype=torch.bool)
    invisible = int((~visible).sum())
    if not bool(visible.any()):
        zero = (pred_box.sum() + cls.sum()) * 0.0
        return LossTerms(zero, zero, zero, zero, invisible)
    pred_box, gt_box = pred_box[visible], gt_box[visible]
    l_cls = focal_loss(cls[visible], target[visible])
    l_l1 = l1_loss(pred_box, gt_box).mean()
    l_giou = giou_loss(pred_box, gt_box).mean()
    total = l_cls + weights.lambda1 * l_l1 + weights.lambda2 * l_giou
    return LossTerms(total, l_cls, l_l1, l_giou, invisible)
