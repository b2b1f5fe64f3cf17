"""The region head: 2x feature upsampling, object + 1.5x context pooling,
channel reduction, and the class/box outputs.

Run:  python demos/07_region_head_context.py
"""
import numpy as np

from msdet import BBox, DetectionHead
from msdet.layers import softmax

rng = np.random.default_rng(4)
head = DetectionHead(in_channels=32, n_classes=3, roi_shape=(7, 7),
                     fc_width=64, rng=rng)

print("stride-8 features are upsampled 2x, so boxes pool at effective stride",
      head.pool_stride)
box = BBox(80, 80, 40, 32)
ctx = DetectionHead.context_box(box)
print(f"object region {box.w:.0f}x{box.h:.0f} -> context region "
      f"{ctx.w:.0f}x{ctx.h:.0f} at the same center")
print(f"stacked channels into reduction conv: {head.reduce.in_channels} "
      f"(halved back to {head.reduce.out_channels} by an unpadded 3x3)")
print(f"fully connected input: {head.fc.in_features} "
      f"= {head.reduce.out_channels} x 5 x 5")

tap8 = rng.normal(size=(1, 32, 24, 24))      # a 192px image's stride-8 tap
boxes = [box, BBox(120, 60, 56, 56), BBox(500, 500, 20, 20)]   # last one outside
out = head.forward(tap8, boxes)
print(f"\nprocessed {len(boxes)} candidate boxes; skipped {out.skipped} "
      f"degenerate one(s)")
probs = softmax(out.logits[out.valid], axis=1)
print("class probabilities per valid box (rows sum to 1):")
print(np.round(probs, 3))
print("box refinements (dx, dy, dlogw, dlogh):")
print(np.round(out.deltas[out.valid], 3))
