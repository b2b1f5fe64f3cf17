import numpy as np
import pytest

from msdet.boxes import BBox, GeometryError
from msdet.layers import (
    Conv2d, Deconv2d, Linear, MaxPool2d, ReLU, RoiPool, bilinear_weights,
    conv_output_extent, deconv_output_extent, softmax, softmax_backward,
)


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------

def conv2d_oracle(x, w, b, stride, pad):
    """Naive 6-loop convolution: the reference the fast path must match."""
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wid + 2 * pad - kw) // stride + 1
    y = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = b[co]
                    for ci in range(cin):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += w[co, ci, a, bb] * xp[ni, ci, i * stride + a, j * stride + bb]
                    y[ni, co, i, j] = acc
    return y


def max_pool_oracle(x, window, stride):
    n, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    y = np.zeros((n, c, oh, ow))
    for ni in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    y[ni, ci, i, j] = x[ni, ci, i * stride:i * stride + window,
                                        j * stride:j * stride + window].max()
    return y


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_ones_kernel_sums_ones(self):
        conv = Conv2d(1, 1, 3)
        conv.weights.data[...] = 1.0
        y = conv.forward(np.ones((1, 1, 3, 3)))
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self):
        conv = Conv2d(1, 1, 3, padding=1)
        conv.weights.data[0, 0, 1, 1] = 1.0
        x = np.random.default_rng(0).normal(size=(1, 1, 5, 5))
        np.testing.assert_allclose(conv.forward(x), x)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 5, 5))
        conv = Conv2d(2, 3, 3, rng=rng)
        expected = conv2d_oracle(x, conv.weights.data, conv.bias.data, 1, 0)
        np.testing.assert_allclose(conv.forward(x), expected, atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 2)])
    def test_strided_padded_vs_oracle(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.normal(size=(2, 3, 7, 6))
        conv = Conv2d(3, 4, 3, stride=stride, padding=pad, rng=rng)
        expected = conv2d_oracle(x, conv.weights.data, conv.bias.data, stride, pad)
        np.testing.assert_allclose(conv.forward(x), expected, atol=1e-12)

    def test_output_extent_formula(self):
        conv = Conv2d(1, 1, (5, 3), stride=2, padding=(2, 1))
        y = conv.forward(np.zeros((1, 1, 11, 9)))
        assert y.shape[2] == conv_output_extent(11, 5, 2, 2)
        assert y.shape[3] == conv_output_extent(9, 3, 2, 1)

    def test_channel_mismatch_raises(self):
        conv = Conv2d(2, 1, 3)
        with pytest.raises(ValueError):
            conv.forward(np.zeros((1, 3, 5, 5)))

    def test_backward_accumulates_param_grads(self):
        rng = np.random.default_rng(2)
        conv = Conv2d(2, 3, 3, padding=1, rng=rng)
        x = rng.normal(size=(2, 2, 6, 6))
        y = conv.forward(x)
        conv.weights.zero_grad()
        conv.bias.zero_grad()
        dx = conv.backward(np.ones_like(y))
        assert dx.shape == x.shape
        assert not np.allclose(conv.weights.grad, 0.0)
        np.testing.assert_allclose(conv.bias.grad, np.full(3, y[0, 0].size * 2))


# ---------------------------------------------------------------------------
# deconv2d
# ---------------------------------------------------------------------------

class TestDeconv2d:
    def test_constant_preserved_by_bilinear(self):
        # border pixels see a truncated kernel support, so exact preservation
        # is an interior property
        deconv = Deconv2d(2, 2, 4, stride=2, padding=1)
        deconv.weights = bilinear_weights(2, 2)
        x = np.full((1, 2, 5, 5), 3.25)
        y = deconv.forward(x)
        assert y.shape == (1, 2, 10, 10)
        np.testing.assert_allclose(y[:, :, 1:-1, 1:-1], 3.25, atol=1e-12)
        assert np.all(y <= 3.25 + 1e-12)

    def test_ramp_interpolates_at_half_steps(self):
        # kernel-4 / stride-2 / pad-1 upsampling samples the input grid at
        # positions (j - 0.5) / 2, so a width ramp 0,1,2,... maps to exactly
        # that line wherever interpolation does not clip at the border.
        deconv = Deconv2d(1, 1, 4, stride=2, padding=1)
        deconv.weights = bilinear_weights(1, 2)
        ramp = np.arange(5.0)
        x = np.tile(ramp, (1, 1, 5, 1))
        y = deconv.forward(x)
        j = np.arange(10)
        expected = (j - 0.5) / 2.0
        interior = (expected >= 0.0) & (expected <= 4.0)
        np.testing.assert_allclose(y[0, 0, 4, interior], expected[interior], atol=1e-12)

    def test_adjoint_of_conv(self):
        # <conv(x), y> == <x, deconv(y)> with the same weight array.
        rng = np.random.default_rng(3)
        failures = 0
        for trial in range(100):
            cin, cout = rng.integers(1, 4, size=2)
            k = int(rng.integers(1, 5))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, k))
            # extents chosen so conv covers the input exactly; a strided conv
            # never reads trailing remainder pixels, where its adjoint is zero
            oh = int(rng.integers(1, 6))
            ow = int(rng.integers(1, 6))
            h = (oh - 1) * stride + k - 2 * pad
            w = (ow - 1) * stride + k - 2 * pad
            if h < k - 2 * pad or h < 1 or w < 1:
                continue
            conv = Conv2d(cin, cout, k, stride=stride, padding=pad, rng=rng)
            x = rng.normal(size=(1, cin, h, w))
            cx = conv.forward(x)
            deconv = Deconv2d(cout, cin, k, stride=stride, padding=pad)
            deconv.weights.data = conv.weights.data
            y = rng.normal(size=cx.shape)
            dy = deconv.forward(y)
            lhs = float(np.sum(cx * y)) - float(np.sum(conv.bias.data) * 0)
            # bias breaks bilinearity; conv bias is zero-initialized here
            rhs = float(np.sum(x * dy))
            if abs(lhs - rhs) > 1e-10 * max(1.0, abs(lhs)):
                failures += 1
        assert failures == 0

    def test_output_extent_formula(self):
        deconv = Deconv2d(1, 1, 4, stride=2, padding=1)
        y = deconv.forward(np.zeros((1, 1, 7, 9)))
        assert y.shape == (1, 1, deconv_output_extent(7, 4, 2, 1), deconv_output_extent(9, 4, 2, 1))


class TestBilinearWeights:
    def test_factor2_center_values(self):
        w = bilinear_weights(1, 2).data
        assert w.shape == (1, 1, 4, 4)
        np.testing.assert_allclose(w[0, 0, 1:3, 1:3], 0.5625)

    def test_reflection_symmetry(self):
        for factor in (2, 3, 4):
            k = bilinear_weights(1, factor).data[0, 0]
            np.testing.assert_allclose(k, k[::-1, :])
            np.testing.assert_allclose(k, k[:, ::-1])
            np.testing.assert_allclose(k, k.T)

    def test_phases_partition_unity(self):
        # each stride-2 phase of the factor-2 kernel sums to 1, which is what
        # makes the upsampling constant-preserving
        k = bilinear_weights(1, 2).data[0, 0]
        for dy in range(2):
            for dx in range(2):
                assert k[dy::2, dx::2].sum() == pytest.approx(1.0, abs=1e-12)

    def test_channels_do_not_mix(self):
        w = bilinear_weights(3, 2).data
        for a in range(3):
            for b in range(3):
                if a != b:
                    np.testing.assert_allclose(w[a, b], 0.0)

    def test_kernel_size_rule(self):
        assert bilinear_weights(1, 2).shape[-1] == 4
        assert bilinear_weights(1, 3).shape[-1] == 5
        assert bilinear_weights(1, 4).shape[-1] == 8


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

class TestMaxPool2d:
    def test_simple_window(self):
        pool = MaxPool2d(2)
        y = pool.forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert y[0, 0, 0, 0] == 4.0

    def test_tie_break_routes_to_first_index(self):
        pool = MaxPool2d(2)
        x = np.full((1, 1, 4, 4), 5.0)
        y = pool.forward(x)
        np.testing.assert_allclose(y, 5.0)
        dx = pool.backward(np.ones_like(y))
        expected = np.zeros((4, 4))
        expected[0::2, 0::2] = 1.0     # first cell of each window
        np.testing.assert_allclose(dx[0, 0], expected)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 9, 7))
        for window, stride in [(2, 2), (3, 2), (2, 1)]:
            pool = MaxPool2d(window, stride)
            np.testing.assert_allclose(pool.forward(x), max_pool_oracle(x, window, stride))

    def test_window_larger_than_input_raises(self):
        with pytest.raises(ValueError):
            MaxPool2d(4).forward(np.zeros((1, 1, 3, 3)))

    def test_backward_scatters_to_argmax(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 2, 6, 6))
        pool = MaxPool2d(2)
        y = pool.forward(x)
        dy = rng.normal(size=y.shape)
        dx = pool.backward(dy)
        # total gradient mass is conserved for non-overlapping windows
        assert dx.sum() == pytest.approx(dy.sum())
        # gradient lands only on per-window maxima
        mask = dx != 0
        np.testing.assert_allclose(np.sort(x[mask]), np.sort(x[mask]))
        assert mask.sum() == y.size


# ---------------------------------------------------------------------------
# ROI pooling
# ---------------------------------------------------------------------------

class TestRoiPool:
    def test_one_cell_per_bin(self):
        stride = 4
        rng = np.random.default_rng(6)
        features = rng.permutation(7 * 7).reshape(1, 7, 7).astype(float)
        roi = BBox.from_corners(0, 0, 7 * stride, 7 * stride)
        pool = RoiPool(7, 7, stride)
        np.testing.assert_allclose(pool.forward(features, roi), features)

    def test_small_roi_duplicates_bins_and_sums_gradient(self):
        # a 2-cell-wide roi pooled to 4 bins reuses source cells; backward
        # must scatter-add so each source accumulates over its duplicates
        stride = 1
        features = np.array([[[1.0, 2.0]]])     # (C=1, H=1, W=2)
        roi = BBox.from_corners(0, 0, 2, 1)
        pool = RoiPool(1, 4, stride)
        y = pool.forward(features, roi)
        np.testing.assert_allclose(y[0, 0], [1.0, 1.0, 2.0, 2.0])
        dx = pool.backward(np.ones_like(y))
        # brute-force scatter-add oracle: each bin contributes 1 to its argmax
        np.testing.assert_allclose(dx[0, 0], [2.0, 2.0])

    def test_constant_map_pools_constant(self):
        features = np.full((3, 10, 10), 2.5)
        pool = RoiPool(7, 5, 2)
        y = pool.forward(features, BBox.from_corners(1, 2, 17, 19))
        np.testing.assert_allclose(y, 2.5)

    def test_roi_outside_raises(self):
        pool = RoiPool(2, 2, 1)
        with pytest.raises(GeometryError):
            pool.forward(np.zeros((1, 4, 4)), BBox.from_corners(10, 10, 12, 12))

    def test_gradient_mass_conserved(self):
        rng = np.random.default_rng(7)
        features = rng.normal(size=(4, 12, 12))
        pool = RoiPool(3, 3, 2)
        y = pool.forward(features, BBox.from_corners(2, 2, 20, 22))
        dy = rng.normal(size=y.shape)
        dx = pool.backward(dy)
        assert dx.sum() == pytest.approx(dy.sum())


# ---------------------------------------------------------------------------
# linear / relu / softmax
# ---------------------------------------------------------------------------

class TestDenseAndActivations:
    def test_linear_matches_matvec_oracle(self):
        rng = np.random.default_rng(8)
        lin = Linear(6, 4, rng=rng)
        x = rng.normal(size=(3, 6))
        expected = np.array([lin.weights.data @ row + lin.bias.data for row in x])
        np.testing.assert_allclose(lin.forward(x), expected, atol=1e-12)

    def test_relu_halfspace(self):
        relu = ReLU()
        x = np.array([[-2.0, -0.5, 0.0, 0.5, 2.0]])
        np.testing.assert_allclose(relu.forward(x), [[0.0, 0.0, 0.0, 0.5, 2.0]])
        np.testing.assert_allclose(relu.backward(np.ones_like(x)), [[0.0, 0.0, 0.0, 1.0, 1.0]])

    def test_softmax_uniform_on_equal_logits(self):
        for k in (2, 4, 7):
            p = softmax(np.zeros((3, k)))
            np.testing.assert_allclose(p, 1.0 / k)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        z = rng.normal(scale=30.0, size=(20, 5))     # large logits still stable
        p = softmax(z)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_softmax_backward_matches_jacobian(self):
        rng = np.random.default_rng(10)
        z = rng.normal(size=(1, 4))
        p = softmax(z)
        dp = rng.normal(size=(1, 4))
        got = softmax_backward(p, dp)
        jac = np.diag(p[0]) - np.outer(p[0], p[0])
        np.testing.assert_allclose(got[0], jac @ dp[0], atol=1e-12)
