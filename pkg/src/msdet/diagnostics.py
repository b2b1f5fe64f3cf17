"""Gradient verification suite covering every differentiable path: the layer
primitives, the loss functions, and the full unified objective through ROI
pooling and the upsampling layer into the trunk."""

from __future__ import annotations

import numpy as np

from .anchors import Anchor, LabeledSample, SampleSet
from .boxes import BBox, encode
from .gradcheck import finite_diff_check, input_tensor_check
from .layers import Conv2d, Deconv2d, Linear, MaxPool2d, RoiPool, softmax
from .losses import branch_loss, smooth_l1, smooth_l1_grad
from .network import DetectionHead, ProposalNetwork, TrunkSpec
from .profiles import profile_branches
from .tensor import Tensor

LOSS_TOL = 1e-4
COMPOSITE_TOL = 1e-3


def _sum_layer(layer, x):
    y = layer.forward(x)
    layer.backward(np.ones_like(y))
    return float(y.sum())


def _check_conv(rng):
    conv = Conv2d(2, 3, 3, stride=1, padding=1, rng=rng)
    x = rng.normal(size=(1, 2, 6, 6))
    return finite_diff_check(lambda: _sum_layer(conv, x),
                             [conv.weights, conv.bias], eps=1e-6)


def _check_deconv(rng):
    deconv = Deconv2d(3, 2, 4, stride=2, padding=1, rng=rng)
    x = rng.normal(size=(1, 3, 5, 5))
    return finite_diff_check(lambda: _sum_layer(deconv, x),
                             [deconv.weights, deconv.bias], eps=1e-6)


def _check_max_pool(rng):
    pool = MaxPool2d(2)
    x = rng.normal(size=(1, 2, 6, 6))

    def run_with(xa):
        y = pool.forward(xa)
        w = np.arange(y.size).reshape(y.shape) + 1.0
        return float((y * w).sum()), pool.backward(w)

    return input_tensor_check(run_with, x, eps=1e-6)


def _check_roi_pool(rng):
    pool = RoiPool(3, 3, 2)
    feats = rng.normal(size=(2, 8, 8))
    roi = BBox.from_corners(1.0, 1.0, 13.0, 15.0)

    def run_with(f):
        y = pool.forward(f, roi)
        w = np.arange(y.size).reshape(y.shape) + 1.0
        return float((y * w).sum()), pool.backward(w)

    return input_tensor_check(run_with, feats, eps=1e-6)


def _check_linear(rng):
    lin = Linear(6, 4, rng=rng)
    x = rng.normal(size=(3, 6))
    return finite_diff_check(lambda: _sum_layer(lin, x),
                             [lin.weights, lin.bias], eps=1e-6)


def _check_softmax_ce(rng):
    logits = Tensor(rng.normal(size=(4, 3)))
    labels = rng.integers(0, 3, size=4)

    def run():
        p = softmax(logits.data, axis=1)
        value = float(-np.log(p[np.arange(4), labels]).mean())
        grad = p.copy()
        grad[np.arange(4), labels] -= 1.0
        logits.add_grad(grad / 4.0)
        return value

    return finite_diff_check(run, [logits], eps=1e-6)


def _check_smooth_l1(rng):
    # evaluated away from the |x| = 1 breakpoint
    xs = Tensor(np.array([-2.5, -0.6, 0.3, 0.85, 1.4, 3.0]))

    def run():
        value = float(sum(smooth_l1(v) for v in xs.data))
        xs.add_grad(np.array([smooth_l1_grad(v) for v in xs.data]))
        return value

    return finite_diff_check(run, [xs], eps=1e-6)


def _check_balanced_ce(rng):
    # cross-entropy weighting through the softmax, as branch_loss applies it
    gamma = 3.0
    pos_logits = Tensor(rng.normal(size=(3, 4)))
    neg_logits = Tensor(rng.normal(size=(5, 4)))
    labels = rng.integers(1, 4, size=3)

    def run():
        p_pos = softmax(pos_logits.data, axis=1)
        p_neg = softmax(neg_logits.data, axis=1)
        w_pos = 1.0 / ((1.0 + gamma) * 3)
        w_neg = gamma / ((1.0 + gamma) * 5)
        value = float(-np.log(p_pos[np.arange(3), labels]).sum() * w_pos
                      - np.log(p_neg[:, 0]).sum() * w_neg)
        g_pos = p_pos.copy()
        g_pos[np.arange(3), labels] -= 1.0
        g_neg = p_neg.copy()
        g_neg[:, 0] -= 1.0
        pos_logits.add_grad(w_pos * g_pos)
        neg_logits.add_grad(w_neg * g_neg)
        return value

    return finite_diff_check(run, [pos_logits, neg_logits], eps=1e-6)


def _make_sample_set(rng, n_pos=3, n_neg=5):
    positives = []
    for _ in range(n_pos):
        anchor = BBox(rng.uniform(20, 40), rng.uniform(20, 40),
                      rng.uniform(10, 30), rng.uniform(10, 30))
        gt = BBox(anchor.cx + rng.uniform(-2, 2), anchor.cy + rng.uniform(-2, 2),
                  anchor.w * rng.uniform(0.9, 1.1), anchor.h * rng.uniform(0.9, 1.1))
        positives.append(LabeledSample(Anchor(anchor, 0, 0, 0, 0), 0,
                                       int(rng.integers(1, 3)), matched_gt=gt,
                                       target=encode(anchor, gt), o_star=0.9))
    negatives = [LabeledSample(Anchor(BBox(90, 90, 20, 20), 0, 0, 0, 0), 0, 0)
                 for _ in range(n_neg)]
    return SampleSet(positives, negatives, gamma=3.0)


def _check_branch_loss(rng):
    samples = _make_sample_set(rng)
    logits = Tensor(rng.normal(size=(8, 3)))
    regs = Tensor(rng.normal(scale=0.4, size=(3, 4)))

    def run():
        res = branch_loss(samples, logits.data, regs.data, lam=0.7, gamma=3.0)
        logits.add_grad(res.dlogits)
        regs.add_grad(res.dreg)
        return res.value

    return finite_diff_check(run, [logits, regs], eps=1e-6)


def _check_unified_path(rng):
    """Full objective: branch losses plus the region-head term, probed at a
    handful of parameters deep in the trunk and head.

    The region set is frozen before probing: within one optimization step the
    sampled ROIs are constants, and re-running the discrete proposal
    selection under perturbed weights would put kinks in the loss.
    """
    from .training import proposal_branch_losses, detection_sample_set
    from .losses import total_loss
    from .network import collect_proposals

    net = ProposalNetwork(profile_branches("synthetic"), 2,
                          trunk_spec=TrunkSpec(stage_channels=(3, 3, 4, 4, 6, 6)),
                          seed=7)
    head = DetectionHead(4, 2, (7, 7), 6, np.random.default_rng(8))
    image = rng.uniform(size=(1, 3, 64, 64))
    gts = [BBox(24, 24, 30, 30), BBox(44, 40, 26, 22)]
    classes = [1, 2]
    alphas = [c.alpha for c in net.branch_configs]

    outputs = net.forward(image)
    grids = net.anchor_grids(64, 64)
    proposals = collect_proposals(outputs, grids, 64, 64, top_n=6, nms_iou=0.7)
    det_samples = detection_sample_set(proposals, gts, classes, 3.0, "random",
                                       np.random.default_rng(99))
    boxes = [s.box for s in det_samples.positives + det_samples.negatives]

    def run():
        sample_rng = np.random.default_rng(99)
        outs = net.forward(image)
        results, d_maps, _ = proposal_branch_losses(
            net, outs, grids, gts, classes, "random", 1.0, 3.0, sample_rng)
        out = head.forward(net.taps[8], boxes)
        keep = out.valid
        n_pos = int(keep[:len(det_samples.positives)].sum())
        det_set = SampleSet(
            [s for s, v in zip(det_samples.positives, keep) if v],
            [s for s, v in zip(det_samples.negatives,
                               keep[len(det_samples.positives):]) if v], 3.0)
        det_res = branch_loss(det_set, out.logits[keep],
                              out.deltas[keep][:n_pos], 1.0, 3.0)
        d_logits = np.zeros_like(out.logits)
        d_deltas = np.zeros_like(out.deltas)
        d_logits[keep] = det_res.dlogits
        d_deltas[np.flatnonzero(keep)[:n_pos]] = det_res.dreg
        d_tap8 = head.backward(d_logits, d_deltas)
        scaled = [(a * ds, a * dd) for a, (ds, dd) in zip(alphas, d_maps)]
        net.backward(scaled, extra_tap_grads={8: d_tap8})
        return total_loss(results, alphas, detection=det_res, alpha_det=1.0).total

    probes = [net.trunk.stages[0].conv1.weights,
              net.trunk.stages[2].conv2.weights,
              net.branches[0].det_convs[0].weights,
              head.reduce.weights, head.fc.weights]
    return finite_diff_check(run, probes, eps=1e-5, max_coords=5,
                             rng=np.random.default_rng(13))


CHECKS = (
    ("conv2d", _check_conv, LOSS_TOL),
    ("deconv2d", _check_deconv, LOSS_TOL),
    ("max_pool2d", _check_max_pool, LOSS_TOL),
    ("roi_pool", _check_roi_pool, LOSS_TOL),
    ("linear", _check_linear, LOSS_TOL),
    ("softmax-cross-entropy", _check_softmax_ce, LOSS_TOL),
    ("smooth-l1", _check_smooth_l1, LOSS_TOL),
    ("balanced-cross-entropy", _check_balanced_ce, LOSS_TOL),
    ("branch-loss", _check_branch_loss, LOSS_TOL),
    ("unified-objective", _check_unified_path, COMPOSITE_TOL),
)


def run_gradient_suite(seed: int = 0) -> list:
    """Run every check; returns [(name, max relative error, tolerance)]."""
    results = []
    for name, fn, tol in CHECKS:
        rng = np.random.default_rng(seed + 1)
        results.append((name, float(fn(rng)), tol))
    return results
