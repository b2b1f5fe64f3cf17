"""Differentiable layer primitives with explicit forward/backward passes.

Layers are small classes that cache whatever the backward pass needs.
Activations travel as plain (N, C, H, W) numpy arrays; parameters are
Tensors so gradients accumulate into their paired buffers. Convolution
and its transpose share one im2col/col2im core, which makes the transposed
convolution the exact adjoint of the convolution with the same weights.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, check_finite, he_normal

__all__ = [
    "Conv2d", "Deconv2d", "MaxPool2d", "RoiPool", "Linear", "ReLU",
    "softmax", "softmax_backward", "bilinear_weights", "conv_output_extent",
    "deconv_output_extent",
]


def conv_output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def deconv_output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + kernel


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded input -> (N, C, kh, kw, oh, ow) window view copy."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, a, b] = xp[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride]
    return cols


def _col2im(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add (N, C, kh, kw, oh, ow) back to (N, C, Hp, Wp)."""
    n, c, kh, kw, oh, ow = cols.shape
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            xp[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride] += cols[:, :, a, b]
    return xp


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


class Conv2d:
    """2D convolution. Weight layout (out_channels, in_channels, kh, kw)."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 rng: np.random.Generator | None = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_h, self.kernel_w = _pair(kernel)
        self.stride = stride
        self.pad_h, self.pad_w = _pair(padding)
        if self.kernel_h < 1 or self.kernel_w < 1 or stride < 1:
            raise ValueError("kernel extents and stride must be >= 1")
        fan_in = in_channels * self.kernel_h * self.kernel_w
        shape = (out_channels, in_channels, self.kernel_h, self.kernel_w)
        if rng is None:
            self.weights = Tensor(np.zeros(shape))
        else:
            self.weights = he_normal(shape, fan_in, rng)
        self.bias = Tensor(np.zeros(out_channels))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        oh = conv_output_extent(h, self.kernel_h, self.stride, self.pad_h)
        ow = conv_output_extent(w, self.kernel_w, self.stride, self.pad_w)
        if oh < 1 or ow < 1:
            raise ValueError(f"kernel {self.kernel_h}x{self.kernel_w} larger than padded input {h}x{w}")
        xp = np.pad(x, ((0, 0), (0, 0), (self.pad_h, self.pad_h), (self.pad_w, self.pad_w)))
        cols = _im2col(xp, self.kernel_h, self.kernel_w, self.stride, oh, ow)
        rows = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, -1)
        wmat = self.weights.data.reshape(self.out_channels, -1)
        y = rows @ wmat.T + self.bias.data
        y = y.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)
        self._cache = (rows, x.shape, xp.shape, oh, ow)
        return check_finite(y, "conv2d forward")

    def backward(self, dy: np.ndarray) -> np.ndarray:
        rows, x_shape, xp_shape, oh, ow = self._cache
        n, c, h, w = x_shape
        dy_rows = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, self.out_channels)
        self.weights.add_grad((dy_rows.T @ rows).reshape(self.weights.shape))
        self.bias.add_grad(dy_rows.sum(axis=0))
        wmat = self.weights.data.reshape(self.out_channels, -1)
        dcols = (dy_rows @ wmat).reshape(n, oh, ow, c, self.kernel_h, self.kernel_w)
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
        dxp = _col2im(dcols, xp_shape[2], xp_shape[3], self.stride)
        dx = dxp[:, :, self.pad_h:self.pad_h + h, self.pad_w:self.pad_w + w]
        return check_finite(dx, "conv2d backward")

    def params(self) -> dict:
        return {"weights": self.weights, "bias": self.bias}


class Deconv2d:
    """Transposed convolution. Weight layout (in_channels, out_channels, kh, kw).

    Its forward is the adjoint of Conv2d's forward under the same weight
    array: a Conv2d weight of shape (O, I, kh, kw) reinterpreted here as
    (in=O, out=I, kh, kw) satisfies <conv(x), y> == <x, deconv(y)>.
    """

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 rng: np.random.Generator | None = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_h, self.kernel_w = _pair(kernel)
        self.stride = stride
        self.pad_h, self.pad_w = _pair(padding)
        fan_in = in_channels * self.kernel_h * self.kernel_w
        shape = (in_channels, out_channels, self.kernel_h, self.kernel_w)
        if rng is None:
            self.weights = Tensor(np.zeros(shape))
        else:
            self.weights = he_normal(shape, fan_in, rng)
        self.bias = Tensor(np.zeros(out_channels))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        oh = deconv_output_extent(h, self.kernel_h, self.stride, self.pad_h)
        ow = deconv_output_extent(w, self.kernel_w, self.stride, self.pad_w)
        rows = x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
        wmat = self.weights.data.reshape(self.in_channels, -1)
        dcols = (rows @ wmat).reshape(n, h, w, self.out_channels, self.kernel_h, self.kernel_w)
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
        yp = _col2im(dcols, oh + 2 * self.pad_h, ow + 2 * self.pad_w, self.stride)
        y = yp[:, :, self.pad_h:self.pad_h + oh, self.pad_w:self.pad_w + ow]
        y = y + self.bias.data[:, None, None]
        self._cache = (rows, x.shape, (oh, ow))
        return check_finite(y, "deconv2d forward")

    def backward(self, dy: np.ndarray) -> np.ndarray:
        rows, x_shape, (oh, ow) = self._cache
        n, c, h, w = x_shape
        dyp = np.pad(dy, ((0, 0), (0, 0), (self.pad_h, self.pad_h), (self.pad_w, self.pad_w)))
        cols = _im2col(dyp, self.kernel_h, self.kernel_w, self.stride, h, w)
        dy_rows = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * h * w, -1)
        self.weights.add_grad((rows.T @ dy_rows).reshape(self.weights.shape))
        self.bias.add_grad(dy.sum(axis=(0, 2, 3)))
        wmat = self.weights.data.reshape(self.in_channels, -1)
        dx = (dy_rows @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return check_finite(dx, "deconv2d backward")

    def params(self) -> dict:
        return {"weights": self.weights, "bias": self.bias}


def bilinear_weights(channels: int, factor: int) -> Tensor:
    """Per-channel tent-filter kernel for exact bilinear 2x-or-more upsampling.

    Shaped (channels, channels, k, k) for a Deconv2d with matching channel
    counts; channels do not mix. Kernel size k = 2*factor - factor % 2.
    """
    if factor < 2:
        raise ValueError("upsampling factor must be >= 2")
    size = 2 * factor - factor % 2
    if size % 2 == 1:
        center = factor - 1.0
    else:
        center = factor - 0.5
    og = np.arange(size, dtype=np.float64)
    filt1d = 1.0 - np.abs(og - center) / factor
    filt = np.outer(filt1d, filt1d)
    w = np.zeros((channels, channels, size, size))
    for c in range(channels):
        w[c, c] = filt
    return Tensor(w)


class MaxPool2d:
    """Max pooling; gradient routed to the argmax (first index on ties)."""

    def __init__(self, window: int, stride: int | None = None):
        self.window = window
        self.stride = stride if stride is not None else window
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        k, s = self.window, self.stride
        if k > h or k > w:
            raise ValueError(f"pool window {k} larger than input {h}x{w}")
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        cols = _im2col(x, k, k, s, oh, ow)              # (N, C, k, k, oh, ow)
        flat = cols.reshape(n, c, k * k, oh, ow)        # window cells row-major
        arg = flat.argmax(axis=2)                       # first index on ties
        y = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
        self._cache = (arg, x.shape, oh, ow)
        return check_finite(y, "max_pool2d forward")

    def backward(self, dy: np.ndarray) -> np.ndarray:
        arg, x_shape, oh, ow = self._cache
        n, c, h, w = x_shape
        k, s = self.window, self.stride
        dcols = np.zeros((n, c, k * k, oh, ow), dtype=dy.dtype)
        np.put_along_axis(dcols, arg[:, :, None], dy[:, :, None], axis=2)
        dx = _col2im(dcols.reshape(n, c, k, k, oh, ow), h, w, s)
        return check_finite(dx, "max_pool2d backward")


class RoiPool:
    """Fixed-size max pooling over a box's footprint on a feature map.

    Boxes are given in input-image pixels; ``stride`` maps them onto the
    feature grid. Empty bins output 0 and propagate no gradient.
    """

    def __init__(self, out_h: int, out_w: int, stride: int):
        self.out_h = out_h
        self.out_w = out_w
        self.stride = stride
        self._cache = None

    def _footprint(self, box, h: int, w: int) -> tuple[int, int, int, int]:
        x0 = int(np.floor((box.cx - box.w / 2.0) / self.stride))
        y0 = int(np.floor((box.cy - box.h / 2.0) / self.stride))
        x1 = int(np.ceil((box.cx + box.w / 2.0) / self.stride))
        y1 = int(np.ceil((box.cy + box.h / 2.0) / self.stride))
        if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
            from .boxes import GeometryError
            raise GeometryError(f"roi {box} lies outside the {w}x{h} feature map")
        return max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)

    def forward(self, features: np.ndarray, box) -> np.ndarray:
        c, h, w = features.shape
        x0, y0, x1, y1 = self._footprint(box, h, w)
        rh, rw = y1 - y0, x1 - x0
        y = np.zeros((c, self.out_h, self.out_w), dtype=features.dtype)
        argmax = np.full((c, self.out_h, self.out_w, 2), -1, dtype=np.int64)
        for j in range(self.out_h):
            hs = y0 + int(np.floor(j * rh / self.out_h))
            he = y0 + int(np.ceil((j + 1) * rh / self.out_h))
            for i in range(self.out_w):
                ws = x0 + int(np.floor(i * rw / self.out_w))
                we = x0 + int(np.ceil((i + 1) * rw / self.out_w))
                if he <= hs or we <= ws:
                    continue        # empty bin stays 0, no gradient
                cell = features[:, hs:he, ws:we].reshape(c, -1)
                flat = cell.argmax(axis=1)
                y[:, j, i] = cell[np.arange(c), flat]
                argmax[:, j, i, 0] = hs + flat // (we - ws)
                argmax[:, j, i, 1] = ws + flat % (we - ws)
        self._cache = (argmax, features.shape)
        return check_finite(y, "roi_pool forward")

    def backward(self, dy: np.ndarray) -> np.ndarray:
        argmax, f_shape = self._cache
        dx = np.zeros(f_shape, dtype=dy.dtype)
        c = f_shape[0]
        rows = argmax[..., 0].reshape(c, -1)
        cols = argmax[..., 1].reshape(c, -1)
        vals = dy.reshape(c, -1)
        for ch in range(c):
            valid = rows[ch] >= 0
            np.add.at(dx[ch], (rows[ch][valid], cols[ch][valid]), vals[ch][valid])
        return check_finite(dx, "roi_pool backward")


class Linear:
    """Fully connected layer: y = x @ W.T + b."""

    def __init__(self, in_features, out_features, rng: np.random.Generator | None = None):
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            self.weights = Tensor(np.zeros((out_features, in_features)))
        else:
            self.weights = he_normal((out_features, in_features), in_features, rng)
        self.bias = Tensor(np.zeros(out_features))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        check_finite(x, "linear input")
        self._cache = x
        return x @ self.weights.data.T + self.bias.data

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._cache
        self.weights.add_grad(dy.T @ x)
        self.bias.add_grad(dy.sum(axis=0))
        return dy @ self.weights.data


class ReLU:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, 0.0)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stabilized softmax; rows sum to 1."""
    check_finite(z, "softmax input")
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient of softmax output p w.r.t. its logits, given upstream dp."""
    inner = (dp * p).sum(axis=axis, keepdims=True)
    return p * (dp - inner)
