"""Proposal and detection quality metrics: best-match recall against a
proposal budget, per-height-bin per-branch recall tables, recall-vs-overlap
curves, and 11-point interpolated average precision.

A ground truth counts as recalled when its best-matched proposal among the
top-budget reaches the overlap threshold. Dataset-level numbers pool the
ground-truth population across images (not per-image averages), so empty
images simply contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import iou_matrix


class RecallValue(float):
    """A recall fraction; ``vacuous`` marks the empty-ground-truth case."""
    vacuous: bool = False

    def __new__(cls, value: float, vacuous: bool = False):
        obj = super().__new__(cls, value)
        obj.vacuous = vacuous
        return obj


@dataclass(frozen=True)
class RecallSpec:
    iou_threshold: float = 0.7
    proposal_budgets: tuple = (1, 5, 10, 25, 50, 100, 250, 500)
    height_bins: tuple = ((25, 50), (50, 100), (100, 200), (200, 10_000))

    def __post_init__(self):
        if not (0.0 < self.iou_threshold < 1.0):
            raise ValueError("overlap threshold must be in (0, 1)")
        lows = [b[0] for b in self.height_bins]
        for (lo, hi), nxt in zip(self.height_bins, lows[1:]):
            if hi > nxt:
                raise ValueError("height bins must be disjoint and ordered")


def matched_mask(gts: list, proposals: list, budget: int, iou_t: float) -> np.ndarray:
    """Per-ground-truth flags: best IoU over the top-budget proposals >= t.

    proposals must already be ranked by descending score.
    """
    if not gts:
        return np.zeros(0, dtype=bool)
    head = [p.box for p in proposals[:budget]]
    if not head:
        return np.zeros(len(gts), dtype=bool)
    overlaps = iou_matrix(gts, head)
    return overlaps.max(axis=1) >= iou_t


def oracle_recall(gts: list, proposals: list, budget: int, iou_t: float) -> RecallValue:
    """Fraction of ground truths recalled by the top-budget proposals.

    An empty ground-truth set yields 1.0 flagged vacuous, keeping averages
    over images well defined.
    """
    if not gts:
        return RecallValue(1.0, vacuous=True)
    mask = matched_mask(gts, proposals, budget, iou_t)
    return RecallValue(float(mask.mean()))


def dataset_recall(gts_per_image: list, proposals_per_image: list,
                   budget: int, iou_t: float) -> RecallValue:
    """Pooled recall over a dataset: recalled ground truths / all ground truths."""
    matched = 0
    total = 0
    for gts, proposals in zip(gts_per_image, proposals_per_image):
        total += len(gts)
        matched += int(matched_mask(gts, proposals, budget, iou_t).sum())
    if total == 0:
        return RecallValue(1.0, vacuous=True)
    return RecallValue(matched / total)


@dataclass
class RecallResult:
    """Per-bin per-branch recall matrix plus overall budget/overlap curves."""
    branch_names: list
    bin_labels: list                      # height bins + "all"
    matrix: np.ndarray                    # (bins+1, branches+1); last col combined
    vacuous: np.ndarray                   # same shape; True where no gts in cell
    budgets: tuple = ()
    recall_by_budget: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iou_grid: np.ndarray = field(default_factory=lambda: np.zeros(0))
    recall_by_iou: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def combined_column(self) -> np.ndarray:
        return self.matrix[:, -1]


def recall_table(gts_per_image: list, branch_proposals_per_image: list,
                 bins: tuple, iou_t: float, budget: int,
                 branch_names: list | None = None) -> RecallResult:
    """Recall as a function of object height, per branch and combined.

    branch_proposals_per_image[i][m] is branch m's ranked proposals for image
    i. Each branch is scored on its own top-budget list; the combined column
    matches against the union of those per-branch lists (set semantics), so
    it can never fall below any single branch.
    """
    n_branches = len(branch_proposals_per_image[0]) if branch_proposals_per_image else 0
    if branch_names is None:
        branch_names = [f"branch{m}" for m in range(n_branches)]
    heights = []
    match_cols = [[] for _ in range(n_branches + 1)]
    for gts, per_branch in zip(gts_per_image, branch_proposals_per_image):
        heights.extend(b.h for b in gts)
        union = []
        for m in range(n_branches):
            ranked = per_branch[m]
            match_cols[m].append(matched_mask(gts, ranked, budget, iou_t))
            union.extend(ranked[:budget])
        match_cols[n_branches].append(matched_mask(gts, union, len(union), iou_t))
    heights = np.asarray(heights)
    cols = [np.concatenate(c) if c else np.zeros(0, dtype=bool) for c in match_cols]

    bin_masks = [(heights >= lo) & (heights < hi) for lo, hi in bins]
    bin_masks.append(np.ones_like(heights, dtype=bool))      # all scales
    labels = [f"{lo}<=h<{hi}" for lo, hi in bins] + ["all"]

    matrix = np.zeros((len(bin_masks), n_branches + 1))
    vacuous = np.zeros_like(matrix, dtype=bool)
    for r, mask in enumerate(bin_masks):
        for c, matches in enumerate(cols):
            if mask.sum() == 0:
                matrix[r, c] = 1.0
                vacuous[r, c] = True
            else:
                matrix[r, c] = matches[mask].mean()
    return RecallResult(list(branch_names) + ["combined"], labels, matrix, vacuous)


def recall_vs_budget(gts_per_image: list, proposals_per_image: list,
                     budgets, iou_t: float) -> np.ndarray:
    return np.array([dataset_recall(gts_per_image, proposals_per_image, b, iou_t)
                     for b in budgets])


def recall_vs_iou(gts_per_image: list, proposals_per_image: list,
                  iou_grid, budget: int = 100) -> np.ndarray:
    """Recall sampled over an overlap-threshold grid at a fixed budget."""
    return np.array([dataset_recall(gts_per_image, proposals_per_image, budget, t)
                     for t in iou_grid])


def average_precision(detections: list, gts_per_image: dict, iou_t: float) -> float:
    """11-point interpolated average precision for one class.

    detections are (image_id, score, box) triples in any order; each ground
    truth is claimable by at most one detection, assigned greedily in score
    order. Depends only on the ranking of scores.
    """
    n_gt = sum(len(v) for v in gts_per_image.values())
    if not detections:
        return 0.0
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    claimed: dict = {img: np.zeros(len(boxes), dtype=bool)
                     for img, boxes in gts_per_image.items()}
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, _, box = detections[i]
        boxes = gts_per_image.get(img, [])
        best_iou, best_j = 0.0, -1
        if boxes:
            overlaps = iou_matrix([box], boxes)[0]
            best_j = int(overlaps.argmax())
            best_iou = float(overlaps[best_j])
        if best_j >= 0 and best_iou >= iou_t and not claimed[img][best_j]:
            claimed[img][best_j] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / max(n_gt, 1)
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 11.0


# ---------------------------------------------------------------------------
# CSV emission. Every file starts with a config-hash comment so results are
# self-describing.
# ---------------------------------------------------------------------------

def recall_table_csv(result: RecallResult, iou_t: float, budget: int,
                     config_hash: str = "") -> str:
    lines = [f"# config_hash={config_hash} iou={iou_t} budget={budget}"]
    lines.append(",".join(["bin"] + result.branch_names))
    for r, label in enumerate(result.bin_labels):
        cells = []
        for c in range(result.matrix.shape[1]):
            v = f"{result.matrix[r, c]:.4f}"
            if result.vacuous[r, c]:
                v += "*"        # vacuous: no ground truth in this cell
            cells.append(v)
        lines.append(",".join([label] + cells))
    return "\n".join(lines) + "\n"


def curve_csv(xs, ys, x_name: str, y_name: str, config_hash: str = "") -> str:
    lines = [f"# config_hash={config_hash}", f"{x_name},{y_name}"]
    for x, y in zip(xs, ys):
        lines.append(f"{x},{float(y):.6f}")
    return "\n".join(lines) + "\n"
