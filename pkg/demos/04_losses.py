"""The loss stack: smooth-L1 location loss, class-balanced cross-entropy,
and the weighted multi-branch total.

Run:  python demos/04_losses.py
"""
import numpy as np

from msdet import balanced_cross_entropy, loc_loss, smooth_l1, total_loss
from msdet.boxes import RegressionTarget
from msdet.losses import BranchLossResult

# --- smooth-L1 is quadratic near zero, linear in the tails -------------------
for x in (0.0, 0.5, 1.0, 2.0, 5.0):
    print(f"smooth_l1({x}) = {smooth_l1(x):.4f}")

t = RegressionTarget(0, 0, 0, 0)
t_hat = RegressionTarget(0.5, 0.5, 0.5, 0.5)
print(f"location loss for residual 0.5 on all four coords: {loc_loss(t, t_hat)}")

# --- balancing keeps rare positives audible ----------------------------------
# 2 positives at p=0.6 vs 60 easy negatives at p0=0.95
pos = [0.6, 0.6]
neg = [0.95] * 60
plain = float(np.mean(-np.log(pos + neg)))
balanced = balanced_cross_entropy(pos, neg, gamma=3.0)
print(f"\nplain mean cross-entropy: {plain:.4f} (positives drowned out)")
print(f"balanced (gamma=3): {balanced:.4f} (positive term carries 1/(1+gamma))")

# --- and collapses to the plain mean when gamma matches the set ratio --------
gamma = len(neg) / len(pos)
p = 0.7
same = balanced_cross_entropy([p] * 2, [p] * 60, gamma)
print(f"with gamma=|S-|/|S+| and equal losses: balanced {same:.6f} "
      f"== plain {-np.log(p):.6f}")

# --- branch losses combine under per-branch weights ---------------------------
results = [BranchLossResult(v, v, 0.0, 1.0, 4, 12) for v in (0.8, 0.5, 0.3, 0.4)]
report = total_loss(results, alphas=[0.9, 1.0, 1.0, 1.0])
print(f"\nweighted total over 4 branches: {report.total:.4f}")
print(f"decomposition re-sums exactly: {report.reconstruct_total():.4f}")
