"""Anchor grids per detection branch, ground-truth matching, the scale
partition, and the three negative-mining strategies.

Run:  python demos/03_anchors_and_sampling.py
"""
import numpy as np

from msdet import BBox, assign_scale_branch, build_anchor_grid, label_anchors, sample_negatives
from msdet.profiles import profile_branches

configs = profile_branches("car")
for m, cfg in enumerate(configs):
    grid = build_anchor_grid(cfg, m, 320, 320)
    print(f"{cfg.name}: stride {cfg.stride:2d}, anchors {cfg.anchor_sizes}, "
          f"{len(grid)} anchors on a 320x320 image")

# --- every object belongs to exactly one branch ------------------------------
for size in (40, 70, 120, 250, 320):
    m = assign_scale_branch(BBox(0, 0, size, size), configs)
    print(f"a {size}px object trains {configs[m].name}")

# --- matching anchors to ground truth ----------------------------------------
gts = [BBox(60, 60, 48, 48), BBox(200, 150, 100, 90)]
anchors = build_anchor_grid(configs[0], 0, 320, 320)
labels = label_anchors(anchors, gts, [1, 1])
print(f"\ndet-8 grid vs 2 objects: {len(labels.positives)} positives, "
      f"{len(labels.negative_pool)} negative pool, {len(labels.discarded)} discarded")

# --- negative mining ----------------------------------------------------------
rng = np.random.default_rng(2)
scores = rng.uniform(size=len(labels.negative_pool))    # stand-in objectness
for strategy in ("random", "bootstrapping", "mixture"):
    out = sample_negatives(labels.positives, labels.negative_pool, strategy,
                           gamma=3.0, rng=np.random.default_rng(7), scores=scores)
    idx = [labels.negative_pool.index(s) for s in out.negatives]
    mean_score = float(np.mean(scores[idx]))
    print(f"{strategy:>13}: |S-| = {len(out.negatives)}, mean objectness "
          f"of chosen negatives {mean_score:.3f}")
print("(bootstrapping gathers the hardest negatives: highest mean score)")
