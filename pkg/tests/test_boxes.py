import numpy as np
import pytest

from msdet.boxes import (
    BBox, GeometryError, RegressionTarget, clip, decode, decode_deltas,
    encode, iou, iou_matrix, iou_pixel_oracle, nms, nms_reference,
)


def random_int_box(rng, span=40):
    x0 = int(rng.integers(0, span))
    y0 = int(rng.integers(0, span))
    w = int(rng.integers(1, 20))
    h = int(rng.integers(1, 20))
    return BBox.from_corners(x0, y0, x0 + w, y0 + h)


class TestIoU:
    def test_identical_boxes(self):
        b = BBox(10, 10, 4, 6)
        assert iou(b, b) == 1.0

    def test_disjoint_boxes(self):
        assert iou(BBox(0, 0, 2, 2), BBox(10, 10, 2, 2)) == 0.0

    def test_shifted_square_third(self):
        a = BBox.from_corners(0, 0, 4, 4)
        b = BBox.from_corners(2, 0, 6, 4)
        assert iou(a, b) == pytest.approx(1.0 / 3.0)

    def test_pixel_oracle_reproduces_trivial_cases(self):
        b = BBox.from_corners(0, 0, 4, 4)
        assert iou_pixel_oracle(b, b) == 1.0
        assert iou_pixel_oracle(BBox.from_corners(0, 0, 2, 2),
                                BBox.from_corners(10, 10, 12, 12)) == 0.0
        assert iou_pixel_oracle(b, BBox.from_corners(2, 0, 6, 4)) == pytest.approx(1.0 / 3.0)

    def test_analytic_matches_pixel_oracle_on_1000_boxes(self):
        rng = np.random.default_rng(21)
        for _ in range(1000):
            a = random_int_box(rng)
            b = random_int_box(rng)
            assert iou(a, b) == pytest.approx(iou_pixel_oracle(a, b), abs=1e-12)

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(22)
        for _ in range(300):
            a = random_int_box(rng)
            b = random_int_box(rng)
            v = iou(a, b)
            assert v == iou(b, a)
            assert 0.0 <= v <= 1.0
            assert (v == 1.0) == (a == b)

    def test_pixel_oracle_rejects_fractional_boxes(self):
        with pytest.raises(GeometryError):
            iou_pixel_oracle(BBox(1.3, 2.0, 2.0, 2.0), BBox(2.0, 2.0, 2.0, 2.0))

    def test_iou_matrix_matches_scalar(self):
        rng = np.random.default_rng(23)
        xs = [random_int_box(rng) for _ in range(7)]
        ys = [random_int_box(rng) for _ in range(5)]
        m = iou_matrix(xs, ys)
        for i, a in enumerate(xs):
            for j, b in enumerate(ys):
                assert m[i, j] == pytest.approx(iou(a, b), abs=1e-12)


class TestEncodeDecode:
    def test_identity_pair_gives_zero_target(self):
        a = BBox(30, 40, 20, 10)
        t = encode(a, a)
        assert t == RegressionTarget(0.0, 0.0, 0.0, 0.0)

    def test_half_width_shift(self):
        a = BBox(0, 0, 40, 40)
        gt = BBox(20, 0, 40, 40)
        t = encode(a, gt)
        assert t.tx == pytest.approx(0.5)
        assert (t.ty, t.tw, t.th) == (0.0, 0.0, 0.0)

    def test_round_trip_on_1000_random_pairs(self):
        rng = np.random.default_rng(24)
        worst = 0.0
        for _ in range(1000):
            anchor = BBox(rng.uniform(-50, 50), rng.uniform(-50, 50),
                          rng.uniform(0.5, 80), rng.uniform(0.5, 80))
            gt = BBox(rng.uniform(-50, 50), rng.uniform(-50, 50),
                      rng.uniform(0.5, 80), rng.uniform(0.5, 80))
            back = decode(anchor, encode(anchor, gt))
            worst = max(worst, abs(back.cx - gt.cx), abs(back.cy - gt.cy),
                        abs(back.w - gt.w), abs(back.h - gt.h))
        assert worst < 1e-10

    def test_nonpositive_extent_rejected(self):
        with pytest.raises(GeometryError):
            BBox(0, 0, -1, 3)
        with pytest.raises(GeometryError):
            BBox(0, 0, 4, 0)

    def test_vectorized_decode_matches_scalar(self):
        rng = np.random.default_rng(25)
        anchors = rng.uniform(1, 50, size=(64, 4))
        deltas = rng.normal(scale=0.3, size=(64, 4))
        out = decode_deltas(anchors, deltas)
        for i in range(64):
            a = BBox(*anchors[i])
            d = RegressionTarget(*deltas[i])
            b = decode(a, d)
            np.testing.assert_allclose(out[i], [b.cx, b.cy, b.w, b.h], atol=1e-12)


class TestClip:
    def test_interior_box_unchanged(self):
        b = BBox(10, 10, 4, 4)
        assert clip(b, 100, 100) == b

    def test_half_outside_halved(self):
        b = BBox.from_corners(-4, 0, 4, 4)
        c = clip(b, 100, 100)
        assert (c.x0, c.x1) == (0, 4)
        assert c.w == 4

    def test_fully_outside_raises(self):
        with pytest.raises(GeometryError):
            clip(BBox(200, 200, 4, 4), 100, 100)

    def test_random_boxes_inside_after_clip(self):
        rng = np.random.default_rng(26)
        for _ in range(300):
            b = BBox(rng.uniform(-20, 120), rng.uniform(-20, 120),
                     rng.uniform(1, 60), rng.uniform(1, 60))
            try:
                c = clip(b, 100, 100)
            except GeometryError:
                continue
            assert 0 <= c.x0 <= c.x1 <= 100
            assert 0 <= c.y0 <= c.y1 <= 100


class TestNms:
    def test_duplicate_boxes_keep_higher_score(self):
        b = BBox(5, 5, 4, 4)
        kept = nms([b, b], [0.9, 0.8], 0.5)
        assert kept == [0]

    def test_disjoint_boxes_all_kept_in_score_order(self):
        boxes = [BBox(0, 0, 2, 2), BBox(10, 10, 2, 2), BBox(20, 20, 2, 2)]
        kept = nms(boxes, [0.1, 0.9, 0.5], 0.5)
        assert kept == [1, 2, 0]

    def test_tie_breaks_by_lower_index(self):
        boxes = [BBox(0, 0, 2, 2), BBox(30, 30, 2, 2)]
        assert nms(boxes, [0.7, 0.7], 0.5) == [0, 1]

    def test_matches_quadratic_reference_on_random_instances(self):
        rng = np.random.default_rng(27)
        for _ in range(50):
            boxes = [random_int_box(rng, span=30) for _ in range(50)]
            scores = rng.uniform(size=50).round(2)   # rounded scores force ties
            assert nms(boxes, scores, 0.4) == nms_reference(boxes, scores, 0.4)

    def test_kept_set_is_antichain(self):
        rng = np.random.default_rng(28)
        boxes = [random_int_box(rng, span=25) for _ in range(80)]
        scores = rng.uniform(size=80)
        kept = nms(boxes, scores, 0.3)
        for i in kept:
            for j in kept:
                if i != j:
                    assert iou(boxes[i], boxes[j]) <= 0.3

    def test_non_finite_scores_rejected(self):
        with pytest.raises(GeometryError):
            nms([BBox(0, 0, 2, 2)], [np.nan], 0.5)
