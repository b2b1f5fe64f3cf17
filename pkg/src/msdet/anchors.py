"""Anchor grids, ground-truth matching, scale partitioning, and negative sampling.

Each detection branch owns a grid of reference boxes laid out on its stride.
Anchors are matched to ground truth by best IoU: a match of 0.5 or more makes
a positive carrying the ground truth's class and regression target, below 0.2
the anchor joins the negative pool, and the band in between is discarded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import BBox, RegressionTarget, encode, iou_matrix


@dataclass(frozen=True)
class BranchConfig:
    """Per-branch layout: stride, paired filter/anchor sizes, loss weight.

    filter_sizes are (h, w); anchor_sizes are (w, h) in pixels. The two lists
    are paired in listed order: filter k slides for anchor k.
    """
    name: str
    stride: int
    filter_sizes: tuple
    anchor_sizes: tuple
    alpha: float = 1.0

    def __post_init__(self):
        if self.stride not in (8, 16, 32, 64):
            raise ValueError(f"unsupported branch stride {self.stride}")
        if len(self.filter_sizes) != len(self.anchor_sizes):
            raise ValueError("filter and anchor lists must pair up")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_sizes)


@dataclass(frozen=True)
class Anchor:
    """A reference box tied to one grid cell of one branch."""
    box: BBox
    branch: int
    iy: int
    ix: int
    k: int          # which of the branch's anchor sizes


@dataclass
class LabeledSample:
    anchor: Anchor
    branch: int
    y: int                                   # 0 = background, 1..K = class
    matched_gt: BBox | None = None
    target: RegressionTarget | None = None
    o_star: float = 0.0


@dataclass
class AnchorLabels:
    """Three-way partition of a branch's anchors against the ground truth."""
    positives: list = field(default_factory=list)
    negative_pool: list = field(default_factory=list)
    discarded: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.positives) + len(self.negative_pool) + len(self.discarded)


@dataclass
class SampleSet:
    """One branch's sampled training sets S+ and S-."""
    positives: list
    negatives: list
    gamma: float
    shortfall: bool = False


POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.2


def build_anchor_grid(config: BranchConfig, branch: int, image_w: int, image_h: int) -> list:
    """One anchor per (grid cell x anchor size), centered on the stride grid.

    Anchors straddling the border keep their full extent; IoU against ground
    truth uses the true geometry.
    """
    s = config.stride
    gw = image_w // s
    gh = image_h // s
    anchors = []
    for iy in range(gh):
        cy = iy * s + s / 2.0
        for ix in range(gw):
            cx = ix * s + s / 2.0
            for k, (aw, ah) in enumerate(config.anchor_sizes):
                anchors.append(Anchor(BBox(cx, cy, float(aw), float(ah)), branch, iy, ix, k))
    return anchors


def label_anchors(anchors: list, gt_boxes: list, gt_classes: list) -> AnchorLabels:
    """Match anchors to ground truth by best IoU and partition them.

    Argmax ties go to the lowest ground-truth index. With no ground truth
    every anchor lands in the negative pool.
    """
    labels = AnchorLabels()
    if not gt_boxes:
        labels.negative_pool = [
            LabeledSample(a, a.branch, 0, o_star=0.0) for a in anchors]
        return labels
    for cls in gt_classes:
        if cls < 1:
            raise ValueError("ground-truth classes must be in 1..K")
    overlaps = iou_matrix([a.box for a in anchors], gt_boxes)
    best = overlaps.argmax(axis=1)
    o_star = overlaps[np.arange(len(anchors)), best]
    for idx, a in enumerate(anchors):
        o = float(o_star[idx])
        if o >= POSITIVE_IOU:
            gt = gt_boxes[int(best[idx])]
            labels.positives.append(LabeledSample(
                a, a.branch, int(gt_classes[int(best[idx])]),
                matched_gt=gt, target=encode(a.box, gt), o_star=o))
        elif o < NEGATIVE_IOU:
            labels.negative_pool.append(LabeledSample(a, a.branch, 0, o_star=o))
        else:
            labels.discarded.append(a)
    return labels


def _log_size(w: float, h: float) -> float:
    return float(np.log(np.sqrt(w * h)))


def assign_scale_branch(gt: BBox, configs: list) -> int:
    """Branch whose anchor ladder is nearest the object in log size.

    Distance is min over the branch's anchors of |ln(gt size / anchor size)|
    with size = sqrt(w*h); every ground truth maps to exactly one branch
    (ties to the lower-stride branch).
    """
    gt_log = _log_size(gt.w, gt.h)
    best_branch, best_dist = 0, np.inf
    for m, cfg in enumerate(configs):
        d = min(abs(gt_log - _log_size(aw, ah)) for aw, ah in cfg.anchor_sizes)
        if d < best_dist - 1e-12:
            best_branch, best_dist = m, d
    return best_branch


def filter_positives_to_branch_scale(labels: AnchorLabels, branch: int,
                                     configs: list) -> AnchorLabels:
    """Drop positives whose matched ground truth belongs to another branch.

    Each branch trains only on objects in its own scale range; a positive
    matched to an out-of-range object is discarded rather than made negative.
    """
    kept = AnchorLabels(negative_pool=labels.negative_pool,
                        discarded=list(labels.discarded))
    for s in labels.positives:
        if assign_scale_branch(s.matched_gt, configs) == branch:
            kept.positives.append(s)
        else:
            kept.discarded.append(s.anchor)
    return kept


def sample_negatives(positives: list, pool: list, strategy: str, gamma: float,
                     rng: np.random.Generator, scores=None,
                     empty_positive_base: int = 8) -> SampleSet:
    """Draw S- from the negative pool so that |S-| = gamma * |S+|.

    Strategies: ``random`` picks uniformly without replacement;
    ``bootstrapping`` takes the top-scored negatives; ``mixture`` draws half
    uniformly and fills the rest by bootstrapping from what remains. With no
    positives on a branch, gamma * empty_positive_base negatives are drawn so
    the branch still trains its background side. When the pool cannot cover
    the request, everything available is returned and the set is flagged.
    """
    if strategy not in ("random", "bootstrapping", "mixture"):
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    if strategy in ("bootstrapping", "mixture") and scores is None:
        raise ValueError(f"{strategy} sampling requires objectness scores")
    if scores is not None and len(scores) != len(pool):
        raise ValueError("scores must align with the negative pool")

    base = len(positives) if positives else empty_positive_base
    need = int(round(gamma * base))
    shortfall = need > len(pool)
    need = min(need, len(pool))

    if need == len(pool):
        chosen = list(range(len(pool)))
    elif strategy == "random":
        chosen = list(rng.choice(len(pool), size=need, replace=False))
    elif strategy == "bootstrapping":
        chosen = list(_top_scored(np.asarray(scores, dtype=float), need))
    else:
        n_rand = need // 2
        rand_part = list(rng.choice(len(pool), size=n_rand, replace=False))
        taken = set(rand_part)
        remaining = np.array([i for i in range(len(pool)) if i not in taken])
        rem_scores = np.asarray(scores, dtype=float)[remaining]
        boot_part = remaining[_top_scored(rem_scores, need - n_rand)]
        chosen = rand_part + list(boot_part)

    negatives = [pool[int(i)] for i in chosen]
    return SampleSet(list(positives), negatives, gamma, shortfall=shortfall)


def _top_scored(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties broken by lower index."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:k]
