"""Box algebra: overlap, offset coding between anchors and objects, and
greedy suppression of duplicate detections.

Run:  python demos/02_box_geometry.py
"""
import numpy as np

from msdet import BBox, decode, encode, iou, nms
from msdet.boxes import iou_pixel_oracle

# --- IoU against an exact pixel-counting oracle ------------------------------
a = BBox.from_corners(0, 0, 4, 4)
b = BBox.from_corners(2, 0, 6, 4)
print(f"analytic IoU: {iou(a, b):.6f}")
print(f"pixel-count oracle: {iou_pixel_oracle(a, b):.6f}")

# --- anchor-relative offsets round-trip --------------------------------------
anchor = BBox(100, 80, 56, 56)
gt = BBox(112, 74, 72, 48)
t = encode(anchor, gt)
print(f"offsets: tx={t.tx:.3f} ty={t.ty:.3f} tw={t.tw:.3f} th={t.th:.3f}")
back = decode(anchor, t)
print(f"decoded box matches gt: cx {back.cx:.1f} cy {back.cy:.1f} "
      f"w {back.w:.1f} h {back.h:.1f}")

# --- non-maximum suppression --------------------------------------------------
rng = np.random.default_rng(1)
center = BBox(50, 50, 30, 30)
boxes = [center]
for _ in range(6):      # jittered duplicates
    boxes.append(BBox(50 + rng.uniform(-3, 3), 50 + rng.uniform(-3, 3), 30, 30))
boxes.append(BBox(150, 150, 30, 30))        # a distinct second object
scores = [0.95] + list(rng.uniform(0.3, 0.9, size=6)) + [0.8]
kept = nms(boxes, scores, iou_threshold=0.5)
print(f"{len(boxes)} boxes -> kept indices {kept}")
for i in kept:
    print(f"  kept box at ({boxes[i].cx:.0f},{boxes[i].cy:.0f}) score {scores[i]:.2f}")
