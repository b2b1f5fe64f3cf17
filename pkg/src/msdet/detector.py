"""End-to-end inference: proposals from the branch network, refined and
classified by the region head, suppressed per class."""

from __future__ import annotations

import numpy as np

from .boxes import GeometryError, RegressionTarget, clip, decode, nms
from .layers import softmax
from .network import Detection, DetectionHead, ProposalNetwork, collect_proposals


def detect_image(net: ProposalNetwork, head: DetectionHead, image: np.ndarray,
                 rois: int = 100, nms_iou: float = 0.7, det_nms_iou: float = 0.5,
                 score_threshold: float = 0.05, max_detections: int = 100) -> list:
    """Run the full two-network pipeline on one (C, H, W) image.

    Proposal boxes are refined by the head's offsets (one class-agnostic
    set of four per region), scored by class probability, and suppressed
    per class.
    """
    outputs = net.forward(image[None])
    w, h = image.shape[2], image.shape[1]
    grids = net.anchor_grids(w, h)
    proposals = collect_proposals(outputs, grids, w, h, top_n=rois,
                                  nms_iou=nms_iou)
    if not proposals:
        return []
    boxes = [p.box for p in proposals]
    out = head.forward(net.taps[8], boxes)
    probs = softmax(out.logits, axis=1)

    per_class_boxes: dict[int, list] = {}
    per_class_scores: dict[int, list] = {}
    for r, box in enumerate(boxes):
        if not out.valid[r]:
            continue
        refined = decode(box, RegressionTarget(*np.clip(out.deltas[r], -6, 6)))
        try:
            refined = clip(refined, w, h)
        except GeometryError:
            continue
        cls = int(probs[r, 1:].argmax()) + 1
        score = float(probs[r, cls])
        if score < score_threshold:
            continue
        per_class_boxes.setdefault(cls, []).append(refined)
        per_class_scores.setdefault(cls, []).append(score)

    detections: list[Detection] = []
    for cls in sorted(per_class_boxes):
        cboxes = per_class_boxes[cls]
        cscores = per_class_scores[cls]
        for i in nms(cboxes, cscores, det_nms_iou):
            detections.append(Detection(cboxes[i], cscores[i], cls))
    detections.sort(key=lambda d: -d.score)
    return detections[:max_detections]
