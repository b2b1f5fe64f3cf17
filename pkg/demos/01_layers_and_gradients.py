"""Layer primitives: convolution, transposed convolution, pooling, and the
finite-difference machinery that keeps every hand-written backward honest.

Run:  python demos/01_layers_and_gradients.py
"""
import numpy as np

from msdet import Conv2d, Deconv2d, MaxPool2d, bilinear_weights, finite_diff_check

rng = np.random.default_rng(0)

# --- a convolution and its gradient check -----------------------------------
conv = Conv2d(in_channels=2, out_channels=4, kernel=3, padding=1, rng=rng)
x = rng.normal(size=(1, 2, 8, 8))
y = conv.forward(x)
print("conv output shape:", y.shape)


def run():
    out = conv.forward(x)
    conv.backward(np.ones_like(out))
    return float(out.sum())


err = finite_diff_check(run, [conv.weights, conv.bias], eps=1e-6)
print(f"conv weight/bias gradient max relative error: {err:.2e}")

# --- transposed convolution is the exact adjoint ----------------------------
deconv = Deconv2d(4, 2, kernel=3, padding=1)
deconv.weights.data = conv.weights.data         # same array, reinterpreted
v = rng.normal(size=y.shape)
lhs = float((conv.forward(x) * v).sum())
rhs = float((x * deconv.forward(v)).sum())
print(f"adjoint identity <conv(x), v> = <x, deconv(v)>: {lhs:.6f} vs {rhs:.6f}")

# --- exact bilinear 2x upsampling --------------------------------------------
up = Deconv2d(1, 1, kernel=4, stride=2, padding=1)
up.weights = bilinear_weights(1, factor=2)
ramp = np.tile(np.arange(6.0), (1, 1, 6, 1))
doubled = up.forward(ramp)
print("ramp row before:", ramp[0, 0, 2, :])
print("ramp row after 2x:", np.round(doubled[0, 0, 4, :], 3))

# --- max pooling routes gradient to the argmax ------------------------------
pool = MaxPool2d(2)
z = np.array([[[[1.0, 5.0], [3.0, 2.0]]]])
print("pool of [[1,5],[3,2]]:", pool.forward(z)[0, 0, 0, 0])
print("gradient lands on the 5:", pool.backward(np.ones((1, 1, 1, 1)))[0, 0])
