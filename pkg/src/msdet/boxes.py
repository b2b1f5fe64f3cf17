"""Axis-aligned box algebra: IoU, offset coding, clipping, NMS, and oracles.

Boxes use center/size representation (cx, cy, w, h) in pixels throughout the
package; corner form appears only at I/O boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Raised for degenerate or out-of-bounds box operations."""


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise GeometryError(f"box extents must be positive, got w={self.w} h={self.h}")
        if not all(np.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise GeometryError("box coordinates must be finite")

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    @staticmethod
    def from_corners(x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return BBox((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class RegressionTarget:
    """Anchor-normalized box offsets: center shifts and log size ratios."""
    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th])


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when disjoint."""
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b)). Vectorized over both lists."""
    if len(boxes_a) == 0 or len(boxes_b) == 0:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.array([[b.x0, b.y0, b.x1, b.y1] for b in boxes_a])
    b = np.array([[c.x0, c.y0, c.x1, c.y1] for c in boxes_b])
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def iou_pixel_oracle(a: BBox, b: BBox) -> float:
    """Exact IoU for integer-aligned boxes by counting covered unit cells."""
    for box in (a, b):
        for v in (box.x0, box.y0, box.x1, box.y1):
            if abs(v - round(v)) > 1e-9:
                raise GeometryError("pixel oracle requires integer-aligned boxes")
    x_lo = int(round(min(a.x0, b.x0)))
    x_hi = int(round(max(a.x1, b.x1)))
    y_lo = int(round(min(a.y0, b.y0)))
    y_hi = int(round(max(a.y1, b.y1)))
    inter = union = 0
    for x in range(x_lo, x_hi):
        for y in range(y_lo, y_hi):
            in_a = a.x0 <= x < a.x1 and a.y0 <= y < a.y1
            in_b = b.x0 <= x < b.x1 and b.y0 <= y < b.y1
            inter += in_a and in_b
            union += in_a or in_b
    return inter / union


def encode(anchor: BBox, gt: BBox) -> RegressionTarget:
    """Express gt relative to anchor as (dx/w, dy/h, log w ratio, log h ratio)."""
    return RegressionTarget(
        (gt.cx - anchor.cx) / anchor.w,
        (gt.cy - anchor.cy) / anchor.h,
        float(np.log(gt.w / anchor.w)),
        float(np.log(gt.h / anchor.h)),
    )


def decode(anchor: BBox, t: RegressionTarget) -> BBox:
    """Inverse of encode: apply offsets to an anchor."""
    return BBox(
        anchor.cx + t.tx * anchor.w,
        anchor.cy + t.ty * anchor.h,
        anchor.w * float(np.exp(t.tw)),
        anchor.h * float(np.exp(t.th)),
    )


def decode_deltas(anchors_cwh: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized decode for (n, 4) arrays of anchors and offsets.

    Log ratios are clipped to +/- 6 so a wild early-training prediction cannot
    overflow exp; that bound still allows a 400x size change.
    """
    out = np.empty_like(anchors_cwh)
    out[:, 0] = anchors_cwh[:, 0] + deltas[:, 0] * anchors_cwh[:, 2]
    out[:, 1] = anchors_cwh[:, 1] + deltas[:, 1] * anchors_cwh[:, 3]
    out[:, 2] = anchors_cwh[:, 2] * np.exp(np.clip(deltas[:, 2], -6.0, 6.0))
    out[:, 3] = anchors_cwh[:, 3] * np.exp(np.clip(deltas[:, 3], -6.0, 6.0))
    return out


def clip(box: BBox, width: float, height: float) -> BBox:
    """Intersect a box with the image rectangle [0, width] x [0, height]."""
    x0, y0 = max(box.x0, 0.0), max(box.y0, 0.0)
    x1, y1 = min(box.x1, width), min(box.y1, height)
    if x1 <= x0 or y1 <= y0:
        raise GeometryError(f"box {box} lies entirely outside {width}x{height} image")
    return BBox.from_corners(x0, y0, x1, y1)


def nms(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices.

    Selection is by descending score with ties broken by lower original
    index; a box is suppressed if its IoU with any kept box exceeds the
    threshold.
    """
    n = len(boxes)
    if n == 0:
        return []
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise GeometryError("nms requires finite scores")
    order = np.lexsort((np.arange(n), -scores))
    corners = np.array([[b.x0, b.y0, b.x1, b.y1] for b in boxes])
    areas = (corners[:, 2] - corners[:, 0]) * (corners[:, 3] - corners[:, 1])
    kept: list[int] = []
    alive = np.ones(n, dtype=bool)
    for idx in order:
        if not alive[idx]:
            continue
        kept.append(int(idx))
        ix = np.minimum(corners[idx, 2], corners[:, 2]) - np.maximum(corners[idx, 0], corners[:, 0])
        iy = np.minimum(corners[idx, 3], corners[:, 3]) - np.maximum(corners[idx, 1], corners[:, 1])
        inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
        overlap = inter / (areas[idx] + areas - inter)
        alive &= overlap <= iou_threshold
        alive[idx] = False
    return kept


def nms_reference(boxes, scores, iou_threshold: float) -> list[int]:
    """O(n^2) pairwise reference implementation of the same greedy rule."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept
