import numpy as np
import pytest

from msdet.boxes import BBox, clip, decode, nms, RegressionTarget
from msdet.gradcheck import finite_diff_check
from msdet.network import (
    ARCH_KEY, DetectionHead, ProposalNetwork, TrunkSpec, arch_vector,
    checkpoint_params, collect_proposals, flat_deltas, flat_scores,
    proposal_as_detector, verify_arch,
)
from msdet.profiles import profile_branches
from msdet.tensor import load_checkpoint, save_checkpoint


TINY_TRUNK = TrunkSpec(stage_channels=(4, 4, 6, 6, 8, 8))


def tiny_network(n_classes=1, seed=0):
    return ProposalNetwork(profile_branches("synthetic"), n_classes,
                           trunk_spec=TINY_TRUNK, seed=seed)


class TestProposalForward:
    def test_grid_extents_follow_strides(self):
        net = tiny_network()
        outs = net.forward(np.zeros((1, 3, 320, 320)))
        assert [o.grid for o in outs] == [(40, 40), (20, 20), (10, 10), (5, 5)]

    def test_output_channel_arithmetic(self):
        net = tiny_network(n_classes=1)
        outs = net.forward(np.zeros((1, 3, 64, 64)))
        for o in outs:
            a, k1, b = o.scores.shape[1], o.scores.shape[2], o.deltas.shape[2]
            assert a * (k1 + b) == 2 * (2 + 4)

    def test_forward_is_pure(self):
        net = tiny_network()
        rng = np.random.default_rng(50)
        x = rng.normal(size=(1, 3, 64, 64))
        a = net.forward(x.copy())
        b = net.forward(x.copy())
        for oa, ob in zip(a, b):
            assert np.array_equal(oa.scores, ob.scores)
            assert np.array_equal(oa.deltas, ob.deltas)

    def test_image_smaller_than_max_stride_rejected(self):
        net = tiny_network()
        with pytest.raises(ValueError):
            net.forward(np.zeros((1, 3, 32, 32)))

    def test_buffer_conv_only_on_shallowest_branch(self):
        net = tiny_network()
        assert net.branches[0].buffer is not None
        assert all(b.buffer is None for b in net.branches[1:])

    def test_stride_bookkeeping_structural(self):
        # a trunk that cannot reach stride 64 must fail at build time
        with pytest.raises(ValueError):
            ProposalNetwork(profile_branches("synthetic"), 1,
                            trunk_spec=TrunkSpec(stage_channels=(4, 4, 6, 6)))


class TestCollectProposals:
    def test_zero_deltas_reproduce_anchor(self):
        net = tiny_network()
        outs = net.forward(np.zeros((1, 3, 64, 64)))
        grids = net.anchor_grids(64, 64)
        # silence every anchor except one, and zero its deltas
        for o in outs:
            o.scores[:] = 0.0
            o.scores[:, :, 0] = 40.0       # background logit dominates
            o.deltas[:] = 0.0
        outs[0].scores[0, 0, 0, 3, 3] = -40.0
        outs[0].scores[0, 0, 1, 3, 3] = 40.0
        props = collect_proposals(outs, grids, 64, 64, top_n=5, nms_iou=0.7)
        anchor = [a for a in grids[0] if (a.iy, a.ix, a.k) == (3, 3, 0)][0]
        expected = clip(anchor.box, 64, 64)
        assert props[0].box == expected
        assert props[0].score > 0.99

    def test_branches_pool_before_nms(self):
        net = tiny_network()
        outs = net.forward(np.zeros((1, 3, 64, 64)))
        grids = net.anchor_grids(64, 64)
        for o in outs:
            o.scores[:] = 0.0
            o.scores[:, :, 0] = 40.0
            o.deltas[:] = 0.0
        # one confident box on each of two branches, far apart
        outs[0].scores[0, 0, :, 1, 1] = (-40.0, 40.0)
        outs[1].scores[0, 0, :, 2, 2] = (-40.0, 40.0)
        props = collect_proposals(outs, grids, 64, 64, top_n=10, nms_iou=0.7)
        assert {p.branch for p in props[:2]} == {0, 1}

    def test_matches_composed_oracle(self):
        # reference pipeline: decode -> clip -> nms, built box by box
        rng = np.random.default_rng(51)
        net = tiny_network()
        outs = net.forward(rng.normal(size=(1, 3, 64, 64)))
        grids = net.anchor_grids(64, 64)
        props = collect_proposals(outs, grids, 64, 64, top_n=1000, nms_iou=0.6)

        ref_boxes, ref_scores = [], []
        for o, grid in zip(outs, grids):
            probs = flat_scores(o)
            deltas = flat_deltas(o)
            for i, anchor in enumerate(grid):
                t = RegressionTarget(*np.clip(deltas[i], -6, 6))
                decoded = decode(anchor.box, t)
                try:
                    b = clip(decoded, 64, 64)
                except Exception:
                    continue
                ref_boxes.append(b)
                ref_scores.append(1.0 - probs[i, 0])
        kept = nms(ref_boxes, ref_scores, 0.6)
        assert len(props) == len(kept)
        for p, i in zip(props, kept):
            assert p.box == ref_boxes[i]
            assert p.score == pytest.approx(ref_scores[i])


class TestProposalAsDetector:
    def test_modes_coincide_for_single_class(self):
        rng = np.random.default_rng(52)
        net = tiny_network(n_classes=1)
        outs = net.forward(rng.normal(size=(1, 3, 64, 64)))
        grids = net.anchor_grids(64, 64)
        agn = proposal_as_detector(outs, grids, 64, 64, mode="class-agnostic",
                                   score_threshold=0.3)
        spc = proposal_as_detector(outs, grids, 64, 64, mode="class-specific",
                                   score_threshold=0.3)
        assert [(d.box, d.class_id) for d in agn] == [(d.box, d.class_id) for d in spc]
        for a, s in zip(agn, spc):
            assert a.score == pytest.approx(s.score)

    def test_class_specific_argmax_consistent(self):
        rng = np.random.default_rng(53)
        net = tiny_network(n_classes=3)
        x = rng.normal(size=(1, 3, 64, 64))
        outs = net.forward(x)
        grids = net.anchor_grids(64, 64)
        dets = proposal_as_detector(outs, grids, 64, 64, mode="class-specific",
                                    score_threshold=0.0, top_n=50)
        probs_by_branch = [flat_scores(o) for o in outs]
        for d in dets:
            found = any(
                probs[i, 1:].argmax() + 1 == d.class_id
                and probs[i, d.class_id] == pytest.approx(d.score)
                for probs in probs_by_branch for i in range(probs.shape[0]))
            assert found

    def test_quiet_image_yields_empty_list(self):
        net = tiny_network()
        outs = net.forward(np.zeros((1, 3, 64, 64)))
        grids = net.anchor_grids(64, 64)
        for o in outs:
            o.scores[:] = 0.0
            o.scores[:, :, 0] = 40.0      # everything confidently background
        dets = proposal_as_detector(outs, grids, 64, 64, score_threshold=0.05)
        assert dets == []

    def test_unknown_mode_rejected(self):
        net = tiny_network()
        outs = net.forward(np.zeros((1, 3, 64, 64)))
        with pytest.raises(ValueError):
            proposal_as_detector(outs, net.anchor_grids(64, 64), 64, 64, mode="foo")


class TestDetectionHead:
    def _head(self, use_deconv=True, channels=6, classes=2):
        rng = np.random.default_rng(54)
        return DetectionHead(channels, classes, (7, 7), 16, rng,
                             use_deconv=use_deconv)

    def test_context_region_same_center_1p5_extent(self):
        box = BBox(40, 30, 20, 12)
        ctx = DetectionHead.context_box(box)
        assert (ctx.cx, ctx.cy) == (40, 30)
        assert (ctx.w, ctx.h) == (30, 18)

    def test_class_probabilities_sum_to_one(self):
        from msdet.layers import softmax
        rng = np.random.default_rng(55)
        head = self._head()
        tap = rng.normal(size=(1, 6, 16, 16))
        boxes = [BBox(40, 40, 30, 30), BBox(70, 70, 40, 28)]
        out = head.forward(tap, boxes)
        probs = softmax(out.logits, axis=1)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_deconv_doubles_pooled_footprint(self):
        head_on = self._head(use_deconv=True)
        head_off = self._head(use_deconv=False)
        # effective stride halves, so the same box covers twice the cells
        assert head_on.pool_stride * 2 == head_off.pool_stride
        box = BBox(36, 36, 24, 24)     # edges on the stride-8 grid
        from msdet.layers import RoiPool
        p_on = RoiPool(7, 7, head_on.pool_stride)
        p_off = RoiPool(7, 7, head_off.pool_stride)
        x0a, y0a, x1a, y1a = p_on._footprint(box, 32, 32)
        x0b, y0b, x1b, y1b = p_off._footprint(box, 16, 16)
        assert (x1a - x0a) == 2 * (x1b - x0b)

    def test_degenerate_proposal_skipped_with_flag(self):
        rng = np.random.default_rng(56)
        head = self._head()
        tap = rng.normal(size=(1, 6, 16, 16))
        inside = BBox(40, 40, 30, 30)
        outside = BBox(400, 400, 10, 10)
        out = head.forward(tap, [inside, outside])
        assert out.valid.tolist() == [True, False]
        assert out.skipped == 1

    def test_channel_stack_and_reduction_shapes(self):
        head = self._head(channels=6)
        assert head.reduce.in_channels == 12       # object + context stack
        assert head.reduce.out_channels == 6       # halved back
        assert head.fc.in_features == 6 * 5 * 5    # unpadded 3x3 on 7x7

    def test_gradients_through_head(self):
        rng = np.random.default_rng(57)
        head = self._head(channels=3, classes=1)
        tap = rng.normal(size=(1, 3, 16, 16))
        boxes = [BBox(40, 40, 30, 30), BBox(60, 56, 36, 24)]

        def run():
            out = head.forward(tap, boxes)
            w_l = np.arange(out.logits.size).reshape(out.logits.shape) + 1.0
            w_d = np.arange(out.deltas.size).reshape(out.deltas.shape) + 0.5
            head.backward(w_l, w_d)
            return float((out.logits * w_l).sum() + (out.deltas * w_d).sum())

        tensors = [head.reduce.weights, head.fc.weights, head.cls_out.weights,
                   head.box_out.weights, head.deconv.weights]
        err = finite_diff_check(run, tensors, eps=1e-6, max_coords=8,
                                rng=np.random.default_rng(0))
        assert err < 1e-5


class TestCheckpointing:
    def test_round_trip_restores_forward(self, tmp_path):
        rng = np.random.default_rng(58)
        net = tiny_network(seed=3)
        head = DetectionHead(TINY_TRUNK.tap_channels(8), 1, (7, 7), 8,
                             np.random.default_rng(4))
        x = rng.normal(size=(1, 3, 64, 64))
        before = net.forward(x)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, checkpoint_params(net, head))

        net2 = tiny_network(seed=99)     # different init
        head2 = DetectionHead(TINY_TRUNK.tap_channels(8), 1, (7, 7), 8,
                              np.random.default_rng(5))
        state = load_checkpoint(path)
        verify_arch(state, net2, head2)
        from msdet.tensor import assign_params
        assign_params(net2.params(), state)
        assign_params(head2.params(), state)
        after = net2.forward(x)
        for a, b in zip(before, after):
            np.testing.assert_array_equal(a.scores, b.scores)

    def test_arch_mismatch_detected(self, tmp_path):
        net = tiny_network()
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, checkpoint_params(net))
        other = ProposalNetwork(profile_branches("car"), 1, trunk_spec=TINY_TRUNK)
        with pytest.raises(ValueError):
            verify_arch(load_checkpoint(path), other)

    def test_arch_record_present(self):
        net = tiny_network()
        params = checkpoint_params(net)
        assert ARCH_KEY in params
        assert np.array_equal(params[ARCH_KEY], arch_vector(net, None))
