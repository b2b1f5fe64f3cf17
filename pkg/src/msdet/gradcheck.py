"""Central-difference gradient verification for hand-written backward passes."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def finite_diff_check(run, tensors, eps: float = 1e-6,
                      max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients against central differences.

    ``run()`` must evaluate the scalar-valued (sum-reduced) operation from
    scratch, leaving fresh gradients in each Tensor of ``tensors``; the
    checker then perturbs coordinates by +/- eps calling ``run()`` for values
    only. Returns the max over coordinates of
    |analytic - numeric| / max(1, |analytic|).

    With ``max_coords`` set, that many coordinates per tensor are probed at
    random (for expensive composites); otherwise every coordinate is checked.
    """
    tensors = list(tensors)
    for t in tensors:
        t.zero_grad()
    run()
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            for u in tensors:
                u.zero_grad()
            plus = run()
            flat[idx] = orig - eps
            for u in tensors:
                u.zero_grad()
            minus = run()
            flat[idx] = orig
            numeric = (plus - minus) / (2.0 * eps)
            a = grad.reshape(-1)[idx]
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    # leave the analytic gradients in place for the caller
    for t, grad in zip(tensors, analytic):
        t.grad = grad
    return worst


def input_tensor_check(run_with, x: np.ndarray, eps: float = 1e-6,
                       max_coords: int | None = None,
                       rng: np.random.Generator | None = None) -> float:
    """finite_diff_check specialized to an op's *input* rather than parameters.

    ``run_with(x)`` must return (scalar value, dx). Wraps x in a Tensor so the
    same probing machinery applies.
    """
    holder = Tensor(x)

    def run():
        value, dx = run_with(holder.data)
        holder.add_grad(dx)
        return value

    return finite_diff_check(run, [holder], eps=eps, max_coords=max_coords, rng=rng)
