"""Network assembly: shared trunk, per-scale detection branches, and the
region-classification head with feature upsampling and context embedding.

The proposal side runs a single-scale input through the trunk and attaches a
small detection layer at each tapped resolution (strides 8/16/32/64), so each
branch sees receptive fields matched to one object-scale band. The shallowest
branch gets a buffer convolution so its gradients do not feed straight into
the early trunk layers. The region head pools each candidate box (and a 1.5x
context box) from the 2x-upsampled stride-8 feature map, stacks them, reduces
channels with an unpadded convolution, and emits class probabilities plus a
box refinement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import BranchConfig, build_anchor_grid
from .boxes import BBox, GeometryError, clip, decode_deltas, nms
from .layers import (
    Conv2d, Deconv2d, Linear, MaxPool2d, ReLU, RoiPool, bilinear_weights,
    softmax,
)

BOX_FIELDS = 4          # cx, cy, w, h offsets per anchor
CONTEXT_SCALE = 1.5


@dataclass(frozen=True)
class TrunkSpec:
    """Stage layout for the shared backbone.

    Each stage is two 3x3 convolutions followed by a 2x max-pool, so stage k
    emits features at stride 2^k. Taps at strides 8/16/32/64 feed the four
    detection branches.
    """
    in_channels: int = 3
    stage_channels: tuple = (16, 32, 64, 64, 128, 128)
    tap_strides: tuple = (8, 16, 32, 64)
    input_offset: float = 0.5       # images arrive in [0, 1]; center them

    def stage_for_stride(self, stride: int) -> int:
        return int(np.log2(stride)) - 1     # 0-based stage index

    def tap_channels(self, stride: int) -> int:
        return self.stage_channels[self.stage_for_stride(stride)]

    @property
    def max_stride(self) -> int:
        return 2 ** len(self.stage_channels)


class _Stage:
    """conv-relu-conv-relu-pool block; halves resolution."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv1 = Conv2d(cin, cout, 3, padding=1, rng=rng)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(cout, cout, 3, padding=1, rng=rng)
        self.relu2 = ReLU()
        self.pool = MaxPool2d(2)

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self.relu1.forward(self.conv1.forward(x))
        h = self.relu2.forward(self.conv2.forward(h))
        return self.pool.forward(h)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        d = self.pool.backward(dy)
        d = self.conv2.backward(self.relu2.backward(d))
        return self.conv1.backward(self.relu1.backward(d))

    def params(self, prefix: str) -> dict:
        return {
            f"{prefix}/conv1/weights": self.conv1.weights,
            f"{prefix}/conv1/bias": self.conv1.bias,
            f"{prefix}/conv2/weights": self.conv2.weights,
            f"{prefix}/conv2/bias": self.conv2.bias,
        }


class Trunk:
    def __init__(self, spec: TrunkSpec, rng: np.random.Generator):
        self.spec = spec
        self.stages = []
        cin = spec.in_channels
        for cout in spec.stage_channels:
            self.stages.append(_Stage(cin, cout, rng))
            cin = cout
        # structural stride bookkeeping: each stage halves resolution once,
        # so the tap for stride s must sit at stage log2(s)-1
        for stride in spec.tap_strides:
            k = spec.stage_for_stride(stride)
            if not (0 <= k < len(self.stages)) or 2 ** (k + 1) != stride:
                raise ValueError(f"trunk cannot supply a stride-{stride} tap")

    def forward(self, x: np.ndarray) -> dict:
        """Returns stride -> feature map for every tapped stage."""
        taps = {}
        h = x
        for k, stage in enumerate(self.stages):
            h = stage.forward(h)
            stride = 2 ** (k + 1)
            if stride in self.spec.tap_strides:
                taps[stride] = h
        return taps

    def backward(self, d_taps: dict) -> np.ndarray | None:
        """Propagate tap gradients back through the stage stack."""
        d = None
        for k in reversed(range(len(self.stages))):
            stride = 2 ** (k + 1)
            if stride in d_taps:
                d = d_taps[stride] if d is None else d + d_taps[stride]
            if d is not None:
                d = self.stages[k].backward(d)
        return d

    def params(self) -> dict:
        out = {}
        for k, stage in enumerate(self.stages):
            out.update(stage.params(f"trunk/stage{k + 1}"))
        return out


@dataclass
class BranchOutput:
    """Per-branch maps: class scores and box offsets per anchor per cell."""
    scores: np.ndarray      # (N, A, K+1, H, W)
    deltas: np.ndarray      # (N, A, 4, H, W)

    @property
    def grid(self) -> tuple[int, int]:
        return self.scores.shape[-2], self.scores.shape[-1]


class DetectionBranch:
    """One output head: optional buffer conv + one det conv per anchor size."""

    def __init__(self, cfg: BranchConfig, in_channels: int, n_classes: int,
                 rng: np.random.Generator, with_buffer: bool = False):
        self.cfg = cfg
        self.n_classes = n_classes
        self.fields = n_classes + 1 + BOX_FIELDS
        self.buffer = None
        self.buffer_relu = None
        if with_buffer:
            self.buffer = Conv2d(in_channels, in_channels, 3, padding=1, rng=rng)
            self.buffer_relu = ReLU()
        self.det_convs = []
        for kh, kw in cfg.filter_sizes:
            conv = Conv2d(in_channels, self.fields, (kh, kw),
                          padding=(kh // 2, kw // 2), rng=rng)
            # tempered output init: small weights and a background-prior bias
            # keep early scores near the prior, so hard-negative mining does
            # not chase init noise
            conv.weights.data *= 0.1
            conv.bias.data[0] = 2.0
            self.det_convs.append(conv)

    def forward(self, tap: np.ndarray) -> BranchOutput:
        h = tap
        if self.buffer is not None:
            h = self.buffer_relu.forward(self.buffer.forward(h))
        outs = [conv.forward(h) for conv in self.det_convs]      # (N, fields, H, W)
        stacked = np.stack(outs, axis=1)                          # (N, A, fields, H, W)
        k1 = self.n_classes + 1
        return BranchOutput(np.ascontiguousarray(stacked[:, :, :k1]),
                            np.ascontiguousarray(stacked[:, :, k1:]))

    def backward(self, d_scores: np.ndarray, d_deltas: np.ndarray) -> np.ndarray:
        d_stacked = np.concatenate([d_scores, d_deltas], axis=2)
        d_pre = None
        for k, conv in enumerate(self.det_convs):
            d = conv.backward(d_stacked[:, k])
            d_pre = d if d_pre is None else d_pre + d
        if self.buffer is not None:
            d_pre = self.buffer.backward(self.buffer_relu.backward(d_pre))
        return d_pre

    def params(self, prefix: str) -> dict:
        out = {}
        if self.buffer is not None:
            out[f"{prefix}/buffer/weights"] = self.buffer.weights
            out[f"{prefix}/buffer/bias"] = self.buffer.bias
        for k, conv in enumerate(self.det_convs):
            out[f"{prefix}/det{k}/weights"] = conv.weights
            out[f"{prefix}/det{k}/bias"] = conv.bias
        return out


class ProposalNetwork:
    """Trunk plus one detection branch per configured scale."""

    def __init__(self, branch_configs, n_classes: int,
                 trunk_spec: TrunkSpec | None = None, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.spec = trunk_spec or TrunkSpec()
        self.n_classes = n_classes
        self.branch_configs = list(branch_configs)
        self.trunk = Trunk(self.spec, rng)
        self.branches = []
        min_stride = min(c.stride for c in self.branch_configs)
        for cfg in self.branch_configs:
            self.branches.append(DetectionBranch(
                cfg, self.spec.tap_channels(cfg.stride), n_classes, rng,
                with_buffer=(cfg.stride == min_stride)))
        self.taps: dict[int, np.ndarray] = {}

    def forward(self, image: np.ndarray) -> list:
        n, c, h, w = image.shape
        if h < self.spec.max_stride or w < self.spec.max_stride:
            raise ValueError(
                f"image {w}x{h} smaller than the largest stride {self.spec.max_stride}")
        self.taps = self.trunk.forward(image - self.spec.input_offset)
        return [branch.forward(self.taps[branch.cfg.stride])
                for branch in self.branches]

    def backward(self, d_outputs: list, extra_tap_grads: dict | None = None) -> None:
        """d_outputs holds per-branch (d_scores, d_deltas); extra_tap_grads
        lets a region head sharing the trunk inject its own tap gradients."""
        d_taps: dict[int, np.ndarray] = {}
        for branch, (d_scores, d_deltas) in zip(self.branches, d_outputs):
            d_tap = branch.backward(d_scores, d_deltas)
            stride = branch.cfg.stride
            d_taps[stride] = d_taps.get(stride, 0) + d_tap
        if extra_tap_grads:
            for stride, grad in extra_tap_grads.items():
                d_taps[stride] = d_taps.get(stride, 0) + grad
        self.trunk.backward(d_taps)

    def anchor_grids(self, image_w: int, image_h: int) -> list:
        return [build_anchor_grid(cfg, m, image_w, image_h)
                for m, cfg in enumerate(self.branch_configs)]

    def params(self) -> dict:
        out = self.trunk.params()
        for m, branch in enumerate(self.branches):
            out.update(branch.params(f"branch{m}"))
        return out

    def zero_grads(self) -> None:
        for t in self.params().values():
            t.zero_grad()


@dataclass(frozen=True)
class Proposal:
    box: BBox
    score: float
    branch: int


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float
    class_id: int


def flat_scores(output: BranchOutput) -> np.ndarray:
    """Class probabilities per anchor, flattened in anchor-grid order.

    build_anchor_grid orders anchors (iy, ix, k); returns (n_anchors, K+1).
    """
    n, a, k1, h, w = output.scores.shape
    if n != 1:
        raise ValueError("per-image op: expected batch of 1")
    logits = output.scores[0].transpose(2, 3, 0, 1).reshape(h * w * a, k1)
    return softmax(logits, axis=1)


def flat_deltas(output: BranchOutput) -> np.ndarray:
    n, a, _, h, w = output.deltas.shape
    return output.deltas[0].transpose(2, 3, 0, 1).reshape(h * w * a, BOX_FIELDS)


def _decoded_boxes(output: BranchOutput, grid: list) -> np.ndarray:
    anchors_cwh = np.array([[a.box.cx, a.box.cy, a.box.w, a.box.h] for a in grid])
    return decode_deltas(anchors_cwh, flat_deltas(output))


def collect_proposals(outputs: list, grids: list, image_w: int, image_h: int,
                      top_n: int = 100, nms_iou: float = 0.7) -> list:
    """Decode every anchor's offsets, clip, pool branches, suppress, rank.

    Objectness is 1 - background probability; boxes that vanish after
    clipping are dropped. The surviving boxes from all branches are ranked
    together and the top_n kept.
    """
    boxes: list[BBox] = []
    scores: list[float] = []
    branches: list[int] = []
    for m, (output, grid) in enumerate(zip(outputs, grids)):
        probs = flat_scores(output)
        decoded = _decoded_boxes(output, grid)
        objectness = 1.0 - probs[:, 0]
        for i in range(decoded.shape[0]):
            try:
                b = clip(BBox(*decoded[i]), image_w, image_h)
            except GeometryError:
                continue
            boxes.append(b)
            scores.append(float(objectness[i]))
            branches.append(m)
    kept = nms(boxes, scores, nms_iou)[:top_n] if boxes else []
    return [Proposal(boxes[i], scores[i], branches[i]) for i in kept]


def proposal_as_detector(outputs: list, grids: list, image_w: int, image_h: int,
                         mode: str = "class-agnostic", top_n: int = 100,
                         nms_iou: float = 0.5, score_threshold: float = 0.05) -> list:
    """Use the proposal branches directly as a detector.

    class-agnostic mode ranks by objectness and labels by the argmax class;
    class-specific mode ranks and suppresses per class. With one foreground
    class the two coincide.
    """
    if mode not in ("class-agnostic", "class-specific"):
        raise ValueError(f"unknown detector mode {mode!r}")
    n_classes = outputs[0].scores.shape[2] - 1
    if n_classes < 1:
        raise ValueError("detector requires at least one foreground class")

    per_class_boxes: dict[int, list] = {}
    per_class_scores: dict[int, list] = {}
    for output, grid in zip(outputs, grids):
        probs = flat_scores(output)
        decoded = _decoded_boxes(output, grid)
        label = probs[:, 1:].argmax(axis=1) + 1
        if mode == "class-agnostic":
            score = 1.0 - probs[:, 0]
        else:
            score = probs[np.arange(len(label)), label]
        for i in range(decoded.shape[0]):
            if score[i] < score_threshold:
                continue
            try:
                b = clip(BBox(*decoded[i]), image_w, image_h)
            except GeometryError:
                continue
            per_class_boxes.setdefault(int(label[i]), []).append(b)
            per_class_scores.setdefault(int(label[i]), []).append(float(score[i]))

    detections: list[Detection] = []
    for cls in sorted(per_class_boxes):
        cboxes = per_class_boxes[cls]
        cscores = per_class_scores[cls]
        for i in nms(cboxes, cscores, nms_iou):
            detections.append(Detection(cboxes[i], cscores[i], cls))
    detections.sort(key=lambda d: -d.score)
    return detections[:top_n]


@dataclass
class HeadOutput:
    logits: np.ndarray          # (R, K+1)
    deltas: np.ndarray          # (R, 4)
    valid: np.ndarray           # (R,) bool; False = degenerate, skipped
    skipped: int = 0


class DetectionHead:
    """Region classifier: ROI + context pooling on upsampled trunk features.

    The stride-8 trunk tap is upsampled 2x by a transposed convolution with
    exact-bilinear weights (effective stride 4) so small boxes cover more
    pooling cells. Object and 1.5x context regions are max-pooled to a fixed
    grid, stacked along channels (doubling them), reduced by an unpadded 3x3
    convolution that halves the channels back, then classified by a fully
    connected stack with class and box-offset outputs.
    """

    def __init__(self, in_channels: int, n_classes: int, roi_shape: tuple,
                 fc_width: int, rng: np.random.Generator,
                 tap_stride: int = 8, use_deconv: bool = True):
        self.n_classes = n_classes
        self.roi_h, self.roi_w = roi_shape
        if self.roi_h < 3 or self.roi_w < 3:
            raise ValueError("roi grid must be at least 3x3 for the unpadded reduction")
        self.tap_stride = tap_stride
        self.use_deconv = use_deconv
        self.deconv = None
        if use_deconv:
            self.deconv = Deconv2d(in_channels, in_channels, 4, stride=2, padding=1)
            self.deconv.weights = bilinear_weights(in_channels, 2)
        self.pool_stride = tap_stride // 2 if use_deconv else tap_stride
        self.reduce = Conv2d(2 * in_channels, in_channels, 3, padding=0, rng=rng)
        self.reduce_relu = ReLU()
        flat = in_channels * (self.roi_h - 2) * (self.roi_w - 2)
        self.fc = Linear(flat, fc_width, rng=rng)
        self.fc_relu = ReLU()
        self.cls_out = Linear(fc_width, n_classes + 1, rng=rng)
        self.box_out = Linear(fc_width, BOX_FIELDS, rng=rng)
        self._cache = None

    @staticmethod
    def context_box(box: BBox) -> BBox:
        return BBox(box.cx, box.cy, CONTEXT_SCALE * box.w, CONTEXT_SCALE * box.h)

    def forward(self, tap8: np.ndarray, boxes: list) -> HeadOutput:
        if tap8.shape[0] != 1:
            raise ValueError("region head processes one image at a time")
        feat = self.deconv.forward(tap8)[0] if self.use_deconv else tap8[0]
        k1 = self.n_classes + 1
        logits = np.zeros((len(boxes), k1))
        deltas = np.zeros((len(boxes), BOX_FIELDS))
        valid = np.zeros(len(boxes), dtype=bool)
        pools = []
        stacks = []
        for r, box in enumerate(boxes):
            op = RoiPool(self.roi_h, self.roi_w, self.pool_stride)
            cp = RoiPool(self.roi_h, self.roi_w, self.pool_stride)
            try:
                obj = op.forward(feat, box)
                ctx = cp.forward(feat, self.context_box(box))
            except GeometryError:
                pools.append(None)
                continue
            valid[r] = True
            pools.append((op, cp))
            stacks.append(np.concatenate([obj, ctx], axis=0))
        hidden_shape = None
        if stacks:
            batch = np.stack(stacks)                       # (Rv, 2C, rh, rw)
            hidden = self.reduce_relu.forward(self.reduce.forward(batch))
            hidden_shape = hidden.shape
            fc_out = self.fc_relu.forward(self.fc.forward(hidden.reshape(len(stacks), -1)))
            logits[valid] = self.cls_out.forward(fc_out)
            deltas[valid] = self.box_out.forward(fc_out)
        self._cache = (feat.shape, valid, pools, hidden_shape)
        return HeadOutput(logits, deltas, valid, skipped=int((~valid).sum()))

    def backward(self, dlogits: np.ndarray, ddeltas: np.ndarray) -> np.ndarray:
        """Returns the gradient w.r.t. the stride-8 tap."""
        feat_shape, valid, pools, hidden_shape = self._cache
        d_feat = np.zeros(feat_shape)
        if hidden_shape is not None:
            d_fc = self.cls_out.backward(dlogits[valid])
            d_fc = d_fc + self.box_out.backward(ddeltas[valid])
            d_flat = self.fc.backward(self.fc_relu.backward(d_fc))
            d_hidden = d_flat.reshape(hidden_shape)
            d_batch = self.reduce.backward(self.reduce_relu.backward(d_hidden))
            c = d_batch.shape[1] // 2
            i = 0
            for pair in pools:
                if pair is None:
                    continue
                op, cp = pair
                d_feat += op.backward(d_batch[i, :c])
                d_feat += cp.backward(d_batch[i, c:])
                i += 1
        if self.use_deconv:
            return self.deconv.backward(d_feat[None])
        return d_feat[None]

    def params(self) -> dict:
        out = {}
        if self.deconv is not None:
            out["head/deconv/weights"] = self.deconv.weights
            out["head/deconv/bias"] = self.deconv.bias
        out.update({
            "head/reduce/weights": self.reduce.weights,
            "head/reduce/bias": self.reduce.bias,
            "head/fc/weights": self.fc.weights,
            "head/fc/bias": self.fc.bias,
            "head/cls/weights": self.cls_out.weights,
            "head/cls/bias": self.cls_out.bias,
            "head/bbox/weights": self.box_out.weights,
            "head/bbox/bias": self.box_out.bias,
        })
        return out

    def zero_grads(self) -> None:
        for t in self.params().values():
            t.zero_grad()


def arch_vector(pnet: ProposalNetwork, head: DetectionHead | None = None) -> np.ndarray:
    """Flat numeric description of the architecture for checkpoint headers.

    Layout: [version, K, in_channels, n_stages, stage channels...,
    n_branches, then per branch (stride, alpha, n_anchors, w/h pairs...),
    then head flag and (roi_h, roi_w, fc_width, use_deconv) when present].
    """
    vec = [1.0, float(pnet.n_classes), float(pnet.spec.in_channels),
           float(len(pnet.spec.stage_channels))]
    vec += [float(c) for c in pnet.spec.stage_channels]
    vec.append(float(len(pnet.branch_configs)))
    for cfg in pnet.branch_configs:
        vec += [float(cfg.stride), float(cfg.alpha), float(len(cfg.anchor_sizes))]
        for (aw, ah), (fh, fw) in zip(cfg.anchor_sizes, cfg.filter_sizes):
            vec += [float(aw), float(ah), float(fh), float(fw)]
    if head is None:
        vec.append(0.0)
    else:
        vec += [1.0, float(head.roi_h), float(head.roi_w),
                float(head.fc.out_features), 1.0 if head.use_deconv else 0.0]
    return np.asarray(vec)


ARCH_KEY = "__arch__"


def checkpoint_params(pnet: ProposalNetwork, head: DetectionHead | None = None) -> dict:
    """All named parameters plus the self-describing architecture record."""
    out = {ARCH_KEY: arch_vector(pnet, head)}
    out.update(pnet.params())
    if head is not None:
        out.update(head.params())
    return out


def verify_arch(state: dict, pnet: ProposalNetwork,
                head: DetectionHead | None = None) -> None:
    """Check that a loaded checkpoint describes this network's layout."""
    if ARCH_KEY not in state:
        raise ValueError("checkpoint carries no architecture record")
    expected = arch_vector(pnet, head)
    got = state[ARCH_KEY]
    if got.shape != expected.shape or not np.array_equal(got, expected):
        raise ValueError("checkpoint architecture does not match this network")
