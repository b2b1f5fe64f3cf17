"""A compressed end-to-end run: generate scenes, train the proposal network
briefly, and draw the recall curves. Scaled down to finish in about a
minute; the full desk-scale experiment lives in the CLI and README.

Run:  python demos/08_train_evaluate_small.py
"""
import time
from pathlib import Path

import numpy as np

from msdet import collect_proposals, dataset_recall, recall_vs_budget, recall_vs_iou
from msdet.config import build_network, default_config
from msdet.data import generate_synthetic
from msdet.plotting import svg_line_chart
from msdet.training import train_proposal

t0 = time.time()
cfg = default_config("synthetic", seed=1)
cfg.trunk_channels = (6, 8, 16, 16, 24, 24)      # small for a quick demo
cfg.train.crop_size = 128
cfg.train.stage1.iters = 20
cfg.train.stage2.iters = 40
cfg.train.stage2.decay_every = 30

train_set = generate_synthetic(60, 192, 2, seed=10)
val_set = generate_synthetic(16, 192, 2, seed=11)
net = build_network(cfg)
rows = train_proposal(net, train_set, cfg.train)
print(f"trained {len(rows)} iterations in {time.time()-t0:.0f}s; "
      f"loss {rows[0].report.total:.2f} -> {rows[-1].report.total:.2f}")

gts = [s.annotation.boxes() for s in val_set]
pooled = []
for s in val_set:
    outputs = net.forward(s.image[None])
    grids = net.anchor_grids(192, 192)
    pooled.append(collect_proposals(outputs, grids, 192, 192, top_n=200,
                                    nms_iou=0.6))

budgets = (1, 5, 10, 25, 50, 100, 200)
curve = recall_vs_budget(gts, pooled, budgets, iou_t=0.5)
for b, r in zip(budgets, curve):
    print(f"  recall@{b:<4} = {float(r):.3f}")

grid = np.arange(0.1, 0.91, 0.1)
iou_curve = recall_vs_iou(gts, pooled, grid, budget=100)
svg = svg_line_chart(
    {"recall vs budget": (list(budgets), [float(v) for v in curve])},
    "proposal budget", "recall", title="proposal recall (small demo run)")
out = Path("demo_recall_curve.svg")
out.write_text(svg)
print(f"recall@100 = {float(dataset_recall(gts, pooled, 100, 0.5)):.3f}")
print(f"wrote {out} ({time.time()-t0:.0f}s total)")
