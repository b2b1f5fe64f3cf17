import numpy as np
import pytest

from msdet.boxes import BBox, iou
from msdet.data import generate_synthetic
from msdet.gradcheck import finite_diff_check
from msdet.losses import BranchLossResult, total_loss
from msdet.network import DetectionHead, ProposalNetwork, TrunkSpec
from msdet.profiles import profile_branches
from msdet.tensor import NumericError, Tensor
from msdet.training import (
    JointConfig, SGD, StageConfig, TrainConfig, augment, detection_sample_set,
    sgd_step, train_joint, train_proposal,
)

TINY_TRUNK = TrunkSpec(stage_channels=(3, 3, 4, 4, 6, 6))


def tiny_config(stage1_iters=2, stage2_iters=2, joint_iters=2, seed=0):
    return TrainConfig(
        stage1=StageConfig("random", 0.05, iters=stage1_iters, lr=0.01),
        stage2=StageConfig("bootstrapping", 1.0, iters=stage2_iters, lr=0.01,
                           decay_every=2, decay_factor=0.1),
        joint=JointConfig(iters=joint_iters, lr=0.01, rois_per_image=8),
        crop_size=64, resize_scales=(1.0,), batch_size=2, seed=seed)


def tiny_net(seed=0, n_classes=3):
    return ProposalNetwork(profile_branches("synthetic"), n_classes,
                           trunk_spec=TINY_TRUNK, seed=seed)


@pytest.fixture(scope="module")
def scenes():
    return generate_synthetic(6, 96, 1, seed=11)


class TestAugment:
    def _image(self, h=100, w=120):
        rng = np.random.default_rng(70)
        return rng.uniform(size=(3, h, w))

    def test_unit_scale_is_pure_translation(self):
        img = self._image()
        gt = BBox(60, 50, 30, 24)
        out = augment(img, [gt], [1], scales=[1.0], crop=64,
                      rng=np.random.default_rng(0))
        assert out.scale == 1.0
        ox, oy = out.origin
        assert len(out.boxes) == 1
        b = out.boxes[0]
        assert b.cx == pytest.approx(gt.cx - ox)
        assert b.cy == pytest.approx(gt.cy - oy)
        assert (b.w, b.h) == (gt.w, gt.h)

    def test_doubling_scale_doubles_extents(self):
        img = self._image(64, 64)
        gt = BBox(32, 32, 20, 16)
        out = augment(img, [gt], [1], scales=[2.0], crop=96,
                      rng=np.random.default_rng(1))
        assert out.boxes[0].w == pytest.approx(40, abs=0.01)
        assert out.boxes[0].h == pytest.approx(32, abs=0.01)

    def test_chosen_center_always_inside_patch(self):
        img = self._image()
        rng = np.random.default_rng(2)
        for _ in range(1000):
            gts = [BBox(rng.uniform(15, 105), rng.uniform(15, 85),
                        rng.uniform(8, 28), rng.uniform(8, 28)) for _ in range(3)]
            out = augment(img, gts, [1, 2, 3], scales=[0.8, 1.0, 1.3],
                          crop=48, rng=rng)
            for b in out.boxes:
                assert 0 <= b.cx <= 48 and 0 <= b.cy <= 48
                assert 0 <= b.x0 and b.x1 <= 48

    def test_small_image_padded_and_flagged(self):
        img = self._image(40, 40)
        out = augment(img, [BBox(20, 20, 12, 12)], [1], scales=[1.0], crop=64,
                      rng=np.random.default_rng(3))
        assert out.padded
        assert out.patch.shape == (3, 64, 64)

    def test_mostly_hidden_boxes_dropped(self):
        img = self._image(100, 200)
        # one box at the chosen crop target, another far right that the
        # 64px window can at best clip to under half its area
        target = BBox(32, 50, 20, 20)
        faraway = BBox(180, 50, 60, 20)
        out = augment(img, [target, faraway], [1, 2], scales=[1.0], crop=64,
                      rng=np.random.default_rng(4))
        assert len(out.boxes) == 1

    def test_requires_objects(self):
        with pytest.raises(ValueError):
            augment(self._image(), [], [], scales=[1.0], crop=32,
                    rng=np.random.default_rng(0))


class TestSgd:
    def test_zero_gradient_leaves_params(self):
        t = Tensor(np.ones(4))
        t.zero_grad()
        sgd_step({"w": t}, lr=0.1)
        np.testing.assert_allclose(t.data, 1.0)

    def test_zero_momentum_is_vanilla_descent(self):
        t = Tensor(np.array([2.0]))
        t.zero_grad()
        t.add_grad(np.array([0.5]))
        sgd_step({"w": t}, lr=0.1, momentum=0.0)
        np.testing.assert_allclose(t.data, [1.95])

    def test_two_steps_match_closed_form_on_quadratic(self):
        # f(p) = 0.5*a*p^2; v_{t+1} = mu v_t - lr*a*p_t; p_{t+1} = p_t + v_{t+1}
        a, mu, lr = 3.0, 0.9, 0.05
        t = Tensor(np.array([1.0]))
        state = None
        p, v = 1.0, 0.0
        for _ in range(2):
            t.zero_grad()
            t.add_grad(a * t.data)
            state = sgd_step({"w": t}, lr=lr, momentum=mu, state=state)
            v = mu * v - lr * a * p
            p = p + v
        np.testing.assert_allclose(t.data, [p], atol=1e-15)

    def test_non_finite_gradient_aborts(self):
        t = Tensor(np.ones(2))
        t.grad = np.array([np.inf, 0.0])
        with pytest.raises(NumericError):
            sgd_step({"w": t}, lr=0.1)

    def test_frozen_prefixes_skip_updates(self):
        a, b = Tensor(np.ones(2)), Tensor(np.ones(2))
        for t in (a, b):
            t.zero_grad()
            t.add_grad(np.ones(2))
        opt = SGD({"trunk/stage1/w": a, "branch0/w": b}, lr=0.1,
                  frozen_prefixes=("trunk/stage1/",))
        opt.step()
        np.testing.assert_allclose(a.data, 1.0)
        np.testing.assert_allclose(b.data, 0.9)


class TestStageSchedule:
    def test_lr_decay_closed_form(self):
        st = StageConfig("random", 1.0, iters=30, lr=0.1, decay_every=10,
                         decay_factor=0.1)
        seq = [st.lr_at(i) for i in range(30)]
        expected = [0.1 * 0.1 ** (i // 10) for i in range(30)]
        assert seq == expected
        assert seq[10] == pytest.approx(0.1 * seq[9])

    def test_stage_flag_flips_exactly_at_boundary(self, scenes):
        net = tiny_net()
        rows = train_proposal(net, scenes, tiny_config(2, 3))
        assert [r.stage for r in rows] == ["stage1"] * 2 + ["stage2"] * 3
        assert [r.iteration for r in rows] == list(range(5))

    def test_logged_lr_follows_schedule(self, scenes):
        net = tiny_net()
        cfg = tiny_config(1, 4)
        rows = train_proposal(net, scenes, cfg)
        stage2 = [r.lr for r in rows if r.stage == "stage2"]
        assert stage2 == [0.01, 0.01, pytest.approx(0.001), pytest.approx(0.001)]


class TestTrainProposal:
    def test_deterministic_given_seed(self, scenes):
        rows_a = train_proposal(tiny_net(seed=5), scenes, tiny_config(seed=9))
        rows_b = train_proposal(tiny_net(seed=5), scenes, tiny_config(seed=9))
        assert [r.report.total for r in rows_a] == [r.report.total for r in rows_b]

    def test_loss_log_csv_written(self, scenes, tmp_path):
        net = tiny_net()
        path = tmp_path / "log.csv"
        train_proposal(net, scenes, tiny_config(), log_path=path,
                       config_hash="cafe12")
        lines = path.read_text().splitlines()
        assert lines[0] == "# config_hash=cafe12"
        header = lines[1].split(",")
        assert header[:4] == ["iteration", "stage", "lr", "total"]
        assert len(lines) == 2 + 4      # comment + header + 4 iterations

    def test_fixed_batch_overfits(self, scenes):
        net = tiny_net()
        cfg = tiny_config(stage1_iters=0, stage2_iters=25)
        cfg.fixed_batch = True
        cfg.stage2.lr = 0.05
        cfg.stage2.decay_every = 0
        rows = train_proposal(net, scenes, cfg)
        assert rows[-1].report.total < rows[0].report.total

    def test_report_reconstructs_total(self, scenes):
        rows = train_proposal(tiny_net(), scenes, tiny_config())
        for r in rows:
            assert r.report.reconstruct_total() == pytest.approx(r.report.total)

    def test_interval_snapshots(self, scenes, tmp_path):
        from msdet.tensor import load_checkpoint
        cfg = tiny_config(2, 2)
        cfg.checkpoint_every = 2
        net = tiny_net()
        train_proposal(net, scenes, cfg, checkpoint_dir=tmp_path)
        snaps = sorted(p.name for p in tmp_path.glob("iter*.ckpt"))
        assert snaps == ["iter000002.ckpt", "iter000004.ckpt"]
        state = load_checkpoint(tmp_path / "iter000004.ckpt")
        assert set(state) == set(net.params())


class TestDetectionSampling:
    def test_windows_follow_protocol(self):
        gt = BBox(50, 50, 40, 40)

        class P:     # minimal proposal stand-in
            def __init__(self, box, score):
                self.box, self.score = box, score

        near = BBox(52, 52, 40, 40)       # IoU ~0.83 -> positive
        hard = BBox(70, 70, 40, 40)       # IoU ~0.2 -> negative pool
        easy = BBox(150, 150, 40, 40)     # IoU 0 -> dropped
        assert iou(near, gt) >= 0.5
        assert 0.1 <= iou(hard, gt) < 0.5
        out = detection_sample_set([P(near, 0.9), P(hard, 0.8), P(easy, 0.7)],
                                   [gt], [2], gamma=1.0, strategy="bootstrapping",
                                   rng=np.random.default_rng(0))
        # gt itself joins the candidates, so positives = {near, gt}
        pos_boxes = [s.box for s in out.positives]
        assert near in pos_boxes and gt in pos_boxes
        assert all(s.y == 2 for s in out.positives)
        assert [s.box for s in out.negatives] == [hard]

    def test_positive_targets_decode_to_gt(self):
        from msdet.boxes import decode
        gt = BBox(50, 50, 40, 40)

        class P:
            def __init__(self, box, score):
                self.box, self.score = box, score

        out = detection_sample_set([P(BBox(54, 48, 44, 36), 0.5)], [gt], [1],
                                   gamma=1.0, strategy="random",
                                   rng=np.random.default_rng(0))
        for s in out.positives:
            back = decode(s.box, s.target)
            assert back.cx == pytest.approx(gt.cx, abs=1e-10)
            assert back.w == pytest.approx(gt.w, abs=1e-10)


class TestTrainJoint:
    def test_frozen_prefix_bit_identical(self, scenes):
        net = tiny_net(seed=2)
        rng = np.random.default_rng(8)
        head = DetectionHead(TINY_TRUNK.tap_channels(8), 3, (7, 7), 8, rng)
        cfg = tiny_config(joint_iters=2)
        before = {name: t.data.copy() for name, t in net.params().items()}
        train_joint(net, head, scenes, cfg)
        after = net.params()
        for name in before:
            if name.startswith(("trunk/stage1/", "trunk/stage2/")):
                assert np.array_equal(before[name], after[name].data), name
            elif name.startswith("trunk/stage3/"):
                assert not np.array_equal(before[name], after[name].data), name

    def test_upsampling_weights_stay_bilinear(self, scenes):
        # the default keeps exact-bilinear upsampling fixed; gradients still
        # reach the trunk through it
        net = tiny_net(seed=6)
        head = DetectionHead(TINY_TRUNK.tap_channels(8), 3, (7, 7), 8,
                             np.random.default_rng(9))
        before = head.deconv.weights.data.copy()
        train_joint(net, head, scenes, tiny_config(joint_iters=2))
        assert np.array_equal(before, head.deconv.weights.data)

    def test_upsampling_trainable_when_enabled(self, scenes):
        net = tiny_net(seed=6)
        head = DetectionHead(TINY_TRUNK.tap_channels(8), 3, (7, 7), 8,
                             np.random.default_rng(9))
        cfg = tiny_config(joint_iters=2)
        cfg.joint.train_deconv = True
        before = head.deconv.weights.data.copy()
        train_joint(net, head, scenes, cfg)
        assert not np.array_equal(before, head.deconv.weights.data)

    def test_zero_detection_weight_reduces_to_branch_total(self):
        results = [BranchLossResult(1.5, 1.0, 0.5, 1.0, 2, 6) for _ in range(4)]
        det = BranchLossResult(2.0, 2.0, 0.0, 1.0, 1, 1)
        with_det = total_loss(results, [1.0] * 4, detection=det, alpha_det=0.0)
        without = total_loss(results, [1.0] * 4)
        assert with_det.total == pytest.approx(without.total)

    def test_gradient_through_roi_pool_into_trunk(self):
        # spot-check the full head -> deconv -> trunk path on a few weights
        rng = np.random.default_rng(12)
        net = tiny_net(seed=4)
        head = DetectionHead(TINY_TRUNK.tap_channels(8), 1, (7, 7), 6,
                             np.random.default_rng(5))
        image = rng.uniform(size=(1, 3, 64, 64))
        boxes = [BBox(30, 30, 24, 24), BBox(44, 40, 28, 20)]

        def run():
            net.forward(image)
            out = head.forward(net.taps[8], boxes)
            w = np.arange(out.logits.size).reshape(out.logits.shape) + 1.0
            d_tap8 = head.backward(w, np.zeros_like(out.deltas))
            zero_maps = [(np.zeros_like(o.scores), np.zeros_like(o.deltas))
                         for o in net.forward(image)]
            net.backward(zero_maps, extra_tap_grads={8: d_tap8})
            return float((out.logits * w).sum())

        probes = [net.trunk.stages[2].conv1.weights, head.reduce.weights]
        err = finite_diff_check(run, probes, eps=1e-5, max_coords=5,
                                rng=np.random.default_rng(1))
        assert err < 1e-3
