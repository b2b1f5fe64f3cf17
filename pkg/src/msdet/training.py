"""Training: augmentation, SGD with momentum, the two-stage proposal-network
schedule, and joint optimization of the proposal branches plus region head.

Stage 1 trains with uniformly sampled negatives and a small location-loss
weight; stage 2 switches to hard-negative bootstrapping with full location
weight and steps the learning rate down by 10x on a fixed interval. Joint
training continues from a proposal checkpoint, adds the region-head term to
the objective, and freezes a configurable prefix of trunk stages.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .anchors import (
    SampleSet, filter_positives_to_branch_scale, label_anchors,
    sample_negatives,
)
from .boxes import BBox, encode, iou_matrix
from .data import resize_bilinear
from .losses import LossReport, branch_loss, total_loss
from .network import DetectionHead, ProposalNetwork, collect_proposals
from .tensor import NumericError


class TrainingDiverged(RuntimeError):
    """Loss blew past 1000x its starting value; training was aborted."""


@dataclass
class StageConfig:
    strategy: str
    lam: float
    iters: int
    lr: float
    decay_every: int = 0        # 0 disables decay
    decay_factor: float = 0.1

    def lr_at(self, iteration: int) -> float:
        if self.decay_every <= 0:
            return self.lr
        return self.lr * self.decay_factor ** (iteration // self.decay_every)


@dataclass
class JointConfig:
    iters: int
    lr: float
    decay_every: int = 0
    decay_factor: float = 0.1
    lam: float = 1.0
    strategy: str = "bootstrapping"
    frozen_stages: int = 2          # trunk stages excluded from updates
    alpha_det: float = 1.0
    rois_per_image: int = 32
    proposal_nms_iou: float = 0.7
    # the upsampling layer keeps its exact-bilinear weights by default;
    # gradients still flow through it into the trunk
    train_deconv: bool = False

    def lr_at(self, iteration: int) -> float:
        if self.decay_every <= 0:
            return self.lr
        return self.lr * self.decay_factor ** (iteration // self.decay_every)


@dataclass
class TrainConfig:
    stage1: StageConfig
    stage2: StageConfig
    joint: JointConfig
    crop_size: int = 160
    resize_scales: tuple = (0.7, 1.0, 1.4)
    batch_size: int = 4
    momentum: float = 0.9
    gamma: float = 3.0
    seed: int = 0
    fixed_batch: bool = False       # reuse the first batch every iteration
    checkpoint_every: int = 0       # 0 disables periodic snapshots


def default_train_config(seed: int = 0) -> TrainConfig:
    """Desk-scale schedule; iteration counts are minutes, not days."""
    return TrainConfig(
        stage1=StageConfig("random", 0.05, iters=60, lr=0.02),
        stage2=StageConfig("bootstrapping", 1.0, iters=120, lr=0.02,
                           decay_every=60, decay_factor=0.1),
        joint=JointConfig(iters=120, lr=0.02, decay_every=60),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Augmentation: random rescale, then a crop around a randomly chosen object.
# ---------------------------------------------------------------------------

@dataclass
class AugmentedSample:
    patch: np.ndarray          # (C, crop, crop)
    boxes: list
    classes: list
    scale: float
    origin: tuple
    padded: bool = False


def augment(image: np.ndarray, gt_boxes: list, gt_classes: list,
            scales, crop: int, rng: np.random.Generator,
            min_visible: float = 0.5) -> AugmentedSample:
    """Resize by a randomly chosen factor, crop a window containing a
    randomly chosen object's center, and remap the boxes.

    Boxes are clipped to the window and dropped when less than min_visible
    of their (scaled) area remains. Images smaller than the crop after
    scaling are padded with their mean value and flagged.
    """
    if not gt_boxes:
        raise ValueError("augmentation crops around objects; need at least one box")
    scale = float(rng.choice(np.asarray(scales, dtype=float)))
    c, h, w = image.shape
    sh, sw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    resized = resize_bilinear(image, sh, sw)
    eff_y, eff_x = sh / h, sw / w        # realized factors after rounding
    boxes = [BBox(b.cx * eff_x, b.cy * eff_y, b.w * eff_x, b.h * eff_y)
             for b in gt_boxes]

    padded = False
    if sh < crop or sw < crop:
        canvas = np.full((c, max(sh, crop), max(sw, crop)),
                         resized.mean(axis=(1, 2))[:, None, None])
        canvas[:, :sh, :sw] = resized
        resized = canvas
        sh, sw = resized.shape[1:]
        padded = True

    target = int(rng.integers(len(boxes)))
    cx, cy = boxes[target].cx, boxes[target].cy
    ox_lo, ox_hi = max(0.0, cx - crop), min(float(sw - crop), cx)
    oy_lo, oy_hi = max(0.0, cy - crop), min(float(sh - crop), cy)
    ox = int(rng.uniform(ox_lo, max(ox_lo, ox_hi)))
    oy = int(rng.uniform(oy_lo, max(oy_lo, oy_hi)))

    patch = resized[:, oy:oy + crop, ox:ox + crop]
    kept_boxes, kept_classes = [], []
    for box, cls in zip(boxes, gt_classes):
        x0, y0 = max(box.x0, ox), max(box.y0, oy)
        x1, y1 = min(box.x1, ox + crop), min(box.y1, oy + crop)
        if x1 <= x0 or y1 <= y0:
            continue
        visible = (x1 - x0) * (y1 - y0) / box.area
        if visible < min_visible:
            continue
        kept_boxes.append(BBox.from_corners(x0 - ox, y0 - oy, x1 - ox, y1 - oy))
        kept_classes.append(cls)
    return AugmentedSample(patch, kept_boxes, kept_classes, scale, (ox, oy), padded)


# ---------------------------------------------------------------------------
# SGD with momentum over named parameters.
# ---------------------------------------------------------------------------

class SGD:
    """v <- momentum*v - lr*grad; p <- p + v. Frozen names get no update."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.9,
                 frozen_prefixes: tuple = ()):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.frozen_prefixes = tuple(frozen_prefixes)
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def _frozen(self, name: str) -> bool:
        return any(name.startswith(p) for p in self.frozen_prefixes)

    def step(self) -> None:
        for name, t in self.params.items():
            if self._frozen(name):
                continue
            g = t.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {name}")
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * g
            t.data += v


def sgd_step(params: dict, lr: float, momentum: float = 0.9,
             state: dict | None = None) -> dict:
    """One functional momentum step; returns the velocity state for chaining."""
    if state is None:
        state = {name: np.zeros_like(t.data) for name, t in params.items()}
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
        v = state[name]
        v *= momentum
        v -= lr * g
        t.data += v
    return state


# ---------------------------------------------------------------------------
# Per-patch loss wiring between network outputs and the sampled anchor sets.
# ---------------------------------------------------------------------------

def _flat_logits(output) -> np.ndarray:
    n, a, k1, h, w = output.scores.shape
    return output.scores[0].transpose(2, 3, 0, 1).reshape(h * w * a, k1)


def _flat_regs(output) -> np.ndarray:
    n, a, b, h, w = output.deltas.shape
    return output.deltas[0].transpose(2, 3, 0, 1).reshape(h * w * a, b)


def _flat_index(anchor, grid_w: int, anchors_per_cell: int) -> int:
    return (anchor.iy * grid_w + anchor.ix) * anchors_per_cell + anchor.k


def _unflatten(d_flat: np.ndarray, shape5) -> np.ndarray:
    n, a, k, h, w = shape5
    return d_flat.reshape(h, w, a, k).transpose(2, 3, 0, 1)[None]


def proposal_branch_losses(net: ProposalNetwork, outputs: list, grids: list,
                           gt_boxes: list, gt_classes: list, strategy: str,
                           lam: float, gamma: float,
                           rng: np.random.Generator) -> tuple:
    """Label each branch's anchors, sample its training sets, evaluate the
    joint loss, and scatter gradients back into map-shaped buffers.

    Returns (branch results, per-branch (d_scores, d_deltas), sample sets).
    """
    results, d_maps, sample_sets = [], [], []
    for m, (output, grid) in enumerate(zip(outputs, grids)):
        labels = label_anchors(grid, gt_boxes, gt_classes)
        labels = filter_positives_to_branch_scale(labels, m, net.branch_configs)
        logits_flat = _flat_logits(output)
        regs_flat = _flat_regs(output)
        grid_w = output.grid[1]
        a_per_cell = net.branch_configs[m].anchors_per_cell

        pool_scores = None
        if strategy in ("bootstrapping", "mixture"):
            from .layers import softmax
            probs = softmax(logits_flat, axis=1)
            objectness = 1.0 - probs[:, 0]
            pool_idx = [_flat_index(s.anchor, grid_w, a_per_cell)
                        for s in labels.negative_pool]
            pool_scores = objectness[pool_idx]
        samples = sample_negatives(labels.positives, labels.negative_pool,
                                   strategy, gamma, rng, scores=pool_scores)

        rows = [_flat_index(s.anchor, grid_w, a_per_cell)
                for s in samples.positives + samples.negatives]
        pos_rows = rows[:len(samples.positives)]
        logits = logits_flat[rows] if rows else np.zeros((0, logits_flat.shape[1]))
        regs = regs_flat[pos_rows] if pos_rows else np.zeros((0, 4))

        res = branch_loss(samples, logits, regs, lam, gamma)
        d_logits_flat = np.zeros_like(logits_flat)
        d_regs_flat = np.zeros_like(regs_flat)
        if rows:
            np.add.at(d_logits_flat, rows, res.dlogits)
        if pos_rows:
            np.add.at(d_regs_flat, pos_rows, res.dreg)
        d_maps.append((_unflatten(d_logits_flat, output.scores.shape),
                       _unflatten(d_regs_flat, output.deltas.shape)))
        results.append(res)
        sample_sets.append(samples)
    return results, d_maps, sample_sets


DET_POSITIVE_IOU = 0.5
DET_NEGATIVE_IOU = (0.1, 0.5)


@dataclass
class RoiSample:
    """A region-head training example: a candidate box and its label."""
    box: BBox
    y: int
    target: object = None
    matched_gt: BBox | None = None


def detection_sample_set(proposals: list, gt_boxes: list, gt_classes: list,
                         gamma: float, strategy: str,
                         rng: np.random.Generator) -> tuple:
    """Build the region-head training set from the current proposals.

    Proposals at IoU >= 0.5 with a ground truth are positives labeled by the
    best-matched object; IoU in [0.1, 0.5) makes the negative pool (hard
    backgrounds); easier boxes are dropped. The ground-truth boxes join the
    candidate list so positives exist from the first iteration.

    Returns a SampleSet whose elements are (box, class, target) triples
    wrapped in lightweight records.
    """

    candidates = [(p.box, p.score) for p in proposals]
    candidates += [(b, 1.0) for b in gt_boxes]
    boxes = [b for b, _ in candidates]
    scores = np.array([s for _, s in candidates])
    positives, pool, pool_scores = [], [], []
    if gt_boxes:
        overlaps = iou_matrix(boxes, gt_boxes)
        best = overlaps.argmax(axis=1)
        o_star = overlaps[np.arange(len(boxes)), best]
    else:
        o_star = np.zeros(len(boxes))
        best = np.zeros(len(boxes), dtype=int)
    for i, box in enumerate(boxes):
        if gt_boxes and o_star[i] >= DET_POSITIVE_IOU:
            gt = gt_boxes[int(best[i])]
            positives.append(RoiSample(box, int(gt_classes[int(best[i])]),
                                       encode(box, gt), gt))
        elif DET_NEGATIVE_IOU[0] <= o_star[i] < DET_NEGATIVE_IOU[1]:
            pool.append(RoiSample(box, 0, None))
            pool_scores.append(float(scores[i]))
    if strategy == "random":
        pool_scores = None
    return sample_negatives(positives, pool, strategy, gamma, rng,
                            scores=pool_scores)


# ---------------------------------------------------------------------------
# Training loops.
# ---------------------------------------------------------------------------

@dataclass
class LogRow:
    iteration: int
    stage: str
    lr: float
    report: LossReport


class LossLogWriter:
    """CSV log: one row per iteration, self-describing header."""

    def __init__(self, path, n_branches: int, config_hash: str = "",
                 with_detection: bool = False):
        self.fh = open(path, "w", newline="")
        self.fh.write(f"# config_hash={config_hash}\n")
        cols = ["iteration", "stage", "lr", "total"]
        for m in range(n_branches):
            cols += [f"cls{m}", f"loc{m}", f"npos{m}", f"nneg{m}"]
        if with_detection:
            cols.append("det")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(cols)

    def write(self, row: LogRow) -> None:
        self.writer.writerow([row.iteration, row.stage, repr(row.lr),
                              repr(row.report.total)]
                             + [repr(v) for v in row.report.csv_fields()[1:]])

    def close(self) -> None:
        self.fh.close()


def _make_batch(dataset: list, config: TrainConfig, rng: np.random.Generator) -> list:
    batch = []
    guard = 0
    while len(batch) < config.batch_size:
        guard += 1
        if guard > 50 * config.batch_size:
            raise ValueError("could not assemble a batch with annotated objects")
        sample = dataset[int(rng.integers(len(dataset)))]
        boxes = sample.annotation.boxes()
        if not boxes:
            continue
        batch.append(augment(sample.image, boxes, sample.annotation.classes(),
                             config.resize_scales, config.crop_size, rng))
    return batch


def _train_patch(net: ProposalNetwork, patch: AugmentedSample, strategy: str,
                 lam: float, gamma: float, alphas: list, batch_scale: float,
                 rng: np.random.Generator) -> LossReport:
    outputs = net.forward(patch.patch[None])
    grids = net.anchor_grids(patch.patch.shape[2], patch.patch.shape[1])
    results, d_maps, _ = proposal_branch_losses(
        net, outputs, grids, patch.boxes, patch.classes, strategy, lam, gamma, rng)
    scaled = [(alpha * batch_scale * ds, alpha * batch_scale * dd)
              for alpha, (ds, dd) in zip(alphas, d_maps)]
    net.backward(scaled)
    return total_loss(results, alphas)


def _maybe_snapshot(config: TrainConfig, checkpoint_dir, iteration: int,
                    params: dict) -> None:
    if checkpoint_dir is None or config.checkpoint_every <= 0:
        return
    if (iteration + 1) % config.checkpoint_every == 0:
        from pathlib import Path
        from .tensor import save_checkpoint
        save_checkpoint(Path(checkpoint_dir) / f"iter{iteration + 1:06d}.ckpt",
                        params)


def train_proposal(net: ProposalNetwork, dataset: list, config: TrainConfig,
                   log_path=None, config_hash: str = "",
                   checkpoint_dir=None, stage_callback=None) -> list:
    """Two-stage schedule over the proposal network. Returns the loss log.

    stage_callback(stage_name, net), when given, fires after each stage
    finishes; joint training initializes from the stage-1 snapshot taken
    there, without interrupting the optimizer or the sampling stream.
    """
    rng = np.random.default_rng(config.seed)
    alphas = [cfg.alpha for cfg in net.branch_configs]
    opt = SGD(net.params(), lr=0.0, momentum=config.momentum)
    writer = None
    if log_path is not None:
        writer = LossLogWriter(log_path, len(net.branches), config_hash)
    rows: list[LogRow] = []
    fixed = _make_batch(dataset, config, rng) if config.fixed_batch else None
    initial_total = None
    iteration = 0
    try:
        for stage_name, stage in (("stage1", config.stage1), ("stage2", config.stage2)):
            for s_it in range(stage.iters):
                lr = stage.lr_at(s_it)
                opt.lr = lr
                batch = fixed if fixed is not None else _make_batch(dataset, config, rng)
                net.zero_grads()
                reports = [
                    _train_patch(net, patch, stage.strategy, stage.lam,
                                 config.gamma, alphas, 1.0 / len(batch), rng)
                    for patch in batch]
                mean_total = float(np.mean([r.total for r in reports]))
                merged = LossReport(
                    mean_total,
                    [tuple(np.mean([r.per_branch[m][j] for r in reports])
                           for j in range(6)) for m in range(len(alphas))])
                opt.step()
                if initial_total is None:
                    initial_total = mean_total
                if mean_total > 1e3 * max(initial_total, 1e-12):
                    raise TrainingDiverged(
                        f"loss {mean_total:.3g} exceeds 1000x initial {initial_total:.3g}")
                row = LogRow(iteration, stage_name, lr, merged)
                rows.append(row)
                if writer:
                    writer.write(row)
                _maybe_snapshot(config, checkpoint_dir, iteration, net.params())
                iteration += 1
            if stage_callback is not None:
                stage_callback(stage_name, net)
    finally:
        if writer:
            writer.close()
    return rows


def train_joint(net: ProposalNetwork, head: DetectionHead, dataset: list,
                config: TrainConfig, log_path=None, config_hash: str = "",
                checkpoint_dir=None) -> list:
    """Joint optimization of the proposal branches and the region head.

    The trunk prefix configured in config.joint.frozen_stages receives no
    updates; gradients from the head flow through ROI pooling and the
    upsampling layer into the shared stride-8 tap.
    """
    jc = config.joint
    rng = np.random.default_rng(config.seed + 1)
    alphas = [cfg.alpha for cfg in net.branch_configs]
    frozen = tuple(f"trunk/stage{k + 1}/" for k in range(jc.frozen_stages))
    if not jc.train_deconv:
        frozen += ("head/deconv/",)
    params = dict(net.params())
    params.update(head.params())
    opt = SGD(params, lr=0.0, momentum=config.momentum, frozen_prefixes=frozen)
    writer = None
    if log_path is not None:
        writer = LossLogWriter(log_path, len(net.branches), config_hash,
                               with_detection=True)
    rows: list[LogRow] = []
    initial_total = None
    try:
        for it in range(jc.iters):
            opt.lr = jc.lr_at(it)
            batch = _make_batch(dataset, config, rng)
            net.zero_grads()
            head.zero_grads()
            totals = []
            merged_rows = None
            det_terms = []
            for patch in batch:
                outputs = net.forward(patch.patch[None])
                size = patch.patch.shape[2], patch.patch.shape[1]
                grids = net.anchor_grids(*size)
                results, d_maps, _ = proposal_branch_losses(
                    net, outputs, grids, patch.boxes, patch.classes,
                    jc.strategy, jc.lam, config.gamma, rng)
                proposals = collect_proposals(outputs, grids, size[0], size[1],
                                              top_n=jc.rois_per_image,
                                              nms_iou=jc.proposal_nms_iou)
                det_samples = detection_sample_set(
                    proposals, patch.boxes, patch.classes, config.gamma,
                    jc.strategy, rng)
                roi_boxes = [s.box for s in det_samples.positives + det_samples.negatives]
                scale = 1.0 / len(batch)
                det_res = None
                d_tap8 = None
                if roi_boxes:
                    out = head.forward(net.taps[8], roi_boxes)
                    keep = out.valid
                    pos_keep = keep[:len(det_samples.positives)]
                    det_set = SampleSet(
                        [s for s, v in zip(det_samples.positives, pos_keep) if v],
                        [s for s, v in zip(det_samples.negatives,
                                           keep[len(det_samples.positives):]) if v],
                        config.gamma, det_samples.shortfall)
                    n_pos_valid = len(det_set.positives)
                    det_res = branch_loss(det_set, out.logits[keep],
                                          out.deltas[keep][:n_pos_valid],
                                          jc.lam, config.gamma)
                    d_logits = np.zeros_like(out.logits)
                    d_deltas = np.zeros_like(out.deltas)
                    d_logits[keep] = det_res.dlogits
                    pos_idx = np.flatnonzero(keep)[:n_pos_valid]
                    d_deltas[pos_idx] = det_res.dreg
                    d_tap8 = head.backward(jc.alpha_det * scale * d_logits,
                                           jc.alpha_det * scale * d_deltas)
                scaled = [(alpha * scale * ds, alpha * scale * dd)
                          for alpha, (ds, dd) in zip(alphas, d_maps)]
                net.backward(scaled, extra_tap_grads={8: d_tap8}
                             if d_tap8 is not None else None)
                report = total_loss(results, alphas, detection=det_res,
                                    alpha_det=jc.alpha_det)
                totals.append(report.total)
                det_terms.append(report.detection_term or 0.0)
                if merged_rows is None:
                    merged_rows = [list(r) for r in report.per_branch]
                else:
                    for m, r in enumerate(report.per_branch):
                        merged_rows[m] = [a + b for a, b in zip(merged_rows[m], r)]
            opt.step()
            mean_total = float(np.mean(totals))
            merged = LossReport(
                mean_total,
                [tuple(v / len(batch) for v in r) for r in merged_rows],
                float(np.mean(det_terms)), jc.alpha_det)
            if initial_total is None:
                initial_total = mean_total
            if mean_total > 1e3 * max(initial_total, 1e-12):
                raise TrainingDiverged(
                    f"loss {mean_total:.3g} exceeds 1000x initial {initial_total:.3g}")
            row = LogRow(it, "joint", opt.lr, merged)
            rows.append(row)
            if writer:
                writer.write(row)
            _maybe_snapshot(config, checkpoint_dir, it, params)
    finally:
        if writer:
            writer.close()
    return rows
