"""Dense tensors with paired gradient buffers, plus the checkpoint container.

Everything numeric in this package flows through plain numpy arrays; the
Tensor class exists to pair a parameter (or any differentiable quantity)
with its gradient buffer. Layers cache what they need for their hand-written
backward passes, so there is no autograd tape.
"""

from __future__ import annotations

import struct

import numpy as np

# Test builds run at 64-bit so gradient-check tolerances are meaningful.
# Switch to np.float32 for a fast path; acceptance tests always use float64.
DEFAULT_DTYPE = np.float64

# Every op's forward/backward output is scanned for NaN/Inf when this is on.
FINITE_CHECKS = True

CHECKPOINT_MAGIC = b"MSCNN1"


class NumericError(RuntimeError):
    """Raised when an operation produces NaN/Inf or trips a numeric guard."""


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    """Hard-error on non-finite values. Returns arr for chaining."""
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


class Tensor:
    """A dense n-d array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def add_grad(self, delta: np.ndarray) -> None:
        """Accumulate into the gradient buffer, allocating it on first use."""
        if delta.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {delta.shape} != data shape {self.data.shape}")
        check_finite(delta, "gradient")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += delta

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), dtype=self.data.dtype)
        if self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape), dtype=dtype)


def he_normal(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    """Fan-in-scaled Gaussian init for conv/linear weights."""
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape))


# ---------------------------------------------------------------------------
# Checkpoint container: magic string, then per-parameter records of
# (name length, name bytes, rank, extents, values), integers and floats all
# 64-bit little-endian.
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict) -> None:
    """Write named arrays to the flat binary checkpoint format.

    params maps name -> Tensor or ndarray. Iteration order is preserved,
    so writes are reproducible for identical inputs.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<q", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<q", arr.ndim))
            fh.write(np.asarray(arr.shape, dtype="<i8").tobytes())
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint back into an ordered name -> float64 ndarray dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    out: dict[str, np.ndarray] = {}
    pos = len(CHECKPOINT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<q", take(8))
        extents = np.frombuffer(take(8 * rank), dtype="<i8")
        count = int(np.prod(extents)) if rank > 0 else 1
        values = np.frombuffer(take(8 * count), dtype="<f8")
        out[name] = values.reshape(extents.astype(int)).copy()
    return out


def assign_params(params: dict, state: dict, strict: bool = True) -> None:
    """Load checkpoint arrays into a name -> Tensor mapping, in place."""
    for name, tensor in params.items():
        if name not in state:
            if strict:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            continue
        arr = state[name]
        if arr.shape != tensor.data.shape:
            raise ValueError(
                f"{name}: checkpoint shape {arr.shape} != model shape {tensor.data.shape}")
        tensor.data[...] = arr.astype(tensor.data.dtype)
