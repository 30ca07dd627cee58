"""Box arithmetic, IoU/GIoU and the crop-and-resize operation.

Boxes are center-size ``(cx, cy, w, h)``.  Frame coordinates are continuous
pixel coordinates where pixel ``i`` covers ``[i, i + 1)``; crop-normalized
coordinates put the crop's left/top edge at 0 and right/bottom edge at 1.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

TEMPLATE_FACTOR = 2.0
SEARCH_FACTOR = 4.0
MIN_VISIBLE_FRACTION = 0.1


class Space(str, enum.Enum):
    FRAME = "frame-pixels"
    CROP = "crop-normalized"
    CROP_PIXELS = "crop-pixels"


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float
    space: Space = Space.FRAME

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise GeometryError(f"negative box size: w={self.w}, h={self.h}")

    @classmethod
    def from_xywh(cls, x, y, w, h, space=Space.FRAME):
        """Build from OTB corner form ``(left, top, w, h)``."""
        return cls(x + w / 2, y + h / 2, w, h, space)

    def to_xywh(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.w, self.h)

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self):
        return self.w * self.h

    def astuple(self):
        return (self.cx, self.cy, self.w, self.h)

    def as_tensor(self, dtype=torch.float64):
        return torch.tensor(self.astuple(), dtype=dtype)


def _check_same_space(a: BBox, b: BBox):
    if a.space != b.space:
        raise GeometryError(f"boxes in different spaces: {a.space.value} vs {b.space.value}")


def _inter_union_hull(a: BBox, b: BBox):
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    # areas from the corners too, so identical boxes give inter == union exactly
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter, union, hull


def iou(a: BBox, b: BBox) -> float:
    _check_same_space(a, b)
    inter, union, _ = _inter_union_hull(a, b)
    if union <= 0:
        return 0.0
    return min(inter / union, 1.0)  # rounding can push identical boxes past 1


def giou(a: BBox, b: BBox) -> float:
    _check_same_space(a, b)
    if a.area <= 0 or b.area <= 0:
        raise GeometryError("giou needs boxes with positive area")
    inter, union, hull = _inter_union_hull(a, b)
    return min(inter / union, 1.0) - max(hull - union, 0.0) / hull


# ---------------------------------------------------------------------------
# batched tensor versions, last dim = (cx, cy, w, h)

def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)


def xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], -1)


def box_iou_giou(a: torch.Tensor, b: torch.Tensor):
    """Elementwise IoU and GIoU of two ``(..., 4)`` center-size tensors."""
    a = cxcywh_to_xyxy(a)
    b = cxcywh_to_xyxy(b)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou_ = inter / union
    lt_h = torch.minimum(a[..., :2], b[..., :2])
    rb_h = torch.maximum(a[..., 2:], b[..., 2:])
    wh_h = rb_h - lt_h
    hull = wh_h[..., 0] * wh_h[..., 1]
    return iou_, iou_ - (hull - union) / hull


# ---------------------------------------------------------------------------
# crop transforms

@dataclass(frozen=True)
class CropTransform:
    source_center: tuple
    source_side: float
    output_resolution: int

    @property
    def origin(self):
        half = self.source_side / 2
        return (self.source_center[0] - half, self.source_center[1] - half)

    def point_to_crop(self, x, y, normalized=True):
        ox, oy = self.origin
        scale = 1.0 / self.source_side if normalized else self.output_resolution / self.source_side
        return ((x - ox) * scale, (y - oy) * scale)

    def point_to_frame(self, u, v, normalized=True):
        ox, oy = self.origin
        scale = self.source_side if normalized else self.source_side / self.output_resolution
        return (u * scale + ox, v * scale + oy)


def crop_side(w, h, factor):
    return factor * math.sqrt(w * h)


def map_box(box: BBox, t: CropTransform, direction: str, normalized: bool = True) -> BBox:
    """Map a box between frame pixels and a crop.

    ``direction`` is ``"to_crop"`` or ``"to_frame"``.  With ``normalized=False``
    the crop side is expressed in output pixels instead of ``[0, 1]``.
    """
    crop_space = Space.CROP if normalized else Space.CROP_PIXELS
    if direction == "to_crop":
        if box.space != Space.FRAME:
            raise GeometryError(f"to_crop expects a frame box, got {box.space.value}")
        cx, cy = t.point_to_crop(box.cx, box.cy, normalized)
        s = (1.0 / t.source_side) if normalized else t.output_resolution / t.source_side
        return BBox(cx, cy, box.w * s, box.h * s, crop_space)
    if direction == "to_frame":
        if box.space != crop_space:
            raise GeometryError(f"to_frame expects a {crop_space.value} box, got {box.space.value}")
        cx, cy = t.point_to_frame(box.cx, box.cy, normalized)
        s = t.source_side if normalized else t.source_side / t.output_resolution
        return BBox(cx, cy, box.w * s, box.h * s, Space.FRAME)
    raise GeometryError(f"unknown direction {direction!r}")


def clip_to_crop(box: BBox, min_fraction=MIN_VISIBLE_FRACTION):
    """Clip a crop-normalized box to ``[0, 1]``; returns ``(box, visible)``."""
    if box.space != Space.CROP:
        raise GeometryError("clip_to_crop expects a crop-normalized box")
    x0, y0, x1, y1 = box.corners()
    x0, x1 = min(max(x0, 0.0), 1.0), min(max(x1, 0.0), 1.0)
    y0, y1 = min(max(y0, 0.0), 1.0), min(max(y1, 0.0), 1.0)
    clipped = BBox((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, Space.CROP)
    visible = box.area > 0 and clipped.area >= min_fraction * box.area
    return clipped, visible


def boxes_to_crop(boxes: torch.Tensor, centers: torch.Tensor, sides: torch.Tensor) -> torch.Tensor:
    """Batched frame -> crop-normalized mapping (``centers`` (B, 2), ``sides`` (B,))."""
    s = sides.unsqueeze(-1)
    xy = (boxes[..., :2] - centers) / s + 0.5
    return torch.cat([xy, boxes[..., 2:] / s], -1)


def boxes_to_frame(boxes: torch.Tensor, centers: torch.Tensor, sides: torch.Tensor) -> torch.Tensor:
    s = sides.unsqueeze(-1)
    xy = (boxes[..., :2] - 0.5) * s + centers
    return torch.cat([xy, boxes[..., 2:] * s], -1)


def clip_boxes_to_crop(boxes: torch.Tensor, min_fraction=MIN_VISIBLE_FRACTION):
    """Batched :func:`clip_to_crop`; returns ``(clipped, visible_mask)``."""
    xyxy = cxcywh_to_xyxy(boxes).clamp(0.0, 1.0)
    clipped = xyxy_to_cxcywh(xyxy)
    area = boxes[..., 2] * boxes[..., 3]
    visible = (area > 0) & (clipped[..., 2] * clipped[..., 3] >= min_fraction * area)
    return clipped, visible


def crop_batch(frames: torch.Tensor, boxes: torch.Tensor, factor: float, out_res: int,
               frame_mean: torch.Tensor | None = None):
    """Crop square regions of side ``factor * sqrt(w h)`` around ``boxes``.

    ``frames`` is (B, C, H, W) float, ``boxes`` (B, 4) in frame pixels.  Regions
    outside the frame are filled with the per-channel frame mean.  Returns
    ``(crops, centers, sides)`` with the geometry detached from autograd.
    """
    boxes = boxes.detach().to(torch.float64)
    if bool((boxes[:, 2:] <= 0).any()):
        raise GeometryError("crop needs boxes with positive width and height")
    b, c, height, width = frames.shape
    centers = boxes[:, :2]
    sides = factor * torch.sqrt(boxes[:, 2] * boxes[:, 3])
    if frame_mean is None:
        frame_mean = frames.mean(dim=(2, 3))
    mean = frame_mean.to(frames.dtype).view(b, c, 1, 1)

    # output pixel centers in frame coordinates, then in grid_sample's [-1, 1]
    # (align_corners=False puts pixel i's center at i + 0.5)
    steps = (torch.arange(out_res, dtype=torch.float64) + 0.5) / out_res - 0.5
    xs = centers[:, 0:1] + steps.unsqueeze(0) * sides.unsqueeze(1)
    ys = centers[:, 1:2] + steps.unsqueeze(0) * sides.unsqueeze(1)
    gx = 2 * xs / width - 1
    gy = 2 * ys / height - 1
    grid = torch.stack([gx.unsqueeze(1).expand(b, out_res, out_res),
                        gy.unsqueeze(2).expand(b, out_res, out_res)], -1)
    crops = F.grid_sample(frames - mean, grid.to(frames.dtype), mode="bilinear",
                          padding_mode="zeros", align_corners=False) + mean
    return crops, centers, sides


def crop(frame, box: BBox, search_factor: float, out_res: int):
    """Crop one HxWxC frame (numpy or tensor) around ``box``.

    Returns the crop as an ``out_res x out_res x C`` float array and the
    :class:`CropTransform` mapping crop coordinates back to the frame.
    """
    if box.space != Space.FRAME:
        raise GeometryError("crop expects a box in frame pixels")
    if box.w <= 0 or box.h <= 0:
        raise GeometryError(f"crop needs positive box size, got w={box.w}, h={box.h}")
    if search_factor <= 1:
        raise GeometryError("search_factor must exceed 1")
    arr = torch.as_tensor(np.asarray(frame), dtype=torch.float32)
    if arr.ndim == 2:
        arr = arr.unsqueeze(-1)
    tensor = arr.permute(2, 0, 1).unsqueeze(0)
    crops, centers, sides = crop_batch(tensor, box.as_tensor().unsqueeze(0), search_factor, out_res)
    t = CropTransform((float(centers[0, 0]), float(centers[0, 1])), float(sides[0]), out_res)
    return crops[0].permute(1, 2, 0).numpy(), t
