"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import GradTape, Tensor

# (step, tolerance) per precision
TOLERANCES = {np.dtype(np.float32): (1e-3, 1e-3), np.dtype(np.float64): (1e-6, 1e-6)}


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)``; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def _projected(fn, tensors, weight):
    y = fn(*tensors)
    if weight is None:
        return y
    return ops.sum(ops.mul(y, Tensor(weight, dtype=y.dtype)))


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], dtype=np.float64,
                    seed: int = 0, step: float | None = None) -> list[float]:
    """Compare tape gradients of ``fn`` with central differences.

    ``fn`` maps Tensors to a Tensor; non-scalar outputs are reduced with a
    fixed random projection so every output element contributes. Returns one
    relative error per input.
    """
    dtype = np.dtype(dtype)
    h = step if step is not None else TOLERANCES[dtype][0]
    arrays = [np.array(a, dtype=dtype) for a in inputs]
    probe = fn(*[Tensor(a) for a in arrays])
    weight = None
    if probe.data.size != 1:
        weight = np.random.default_rng(seed + 7919).normal(size=probe.shape).astype(dtype)

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        loss = _projected(fn, tensors, weight)
    tape.gradient(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def evaluate(arrs) -> float:
        y = fn(*[Tensor(a) for a in arrs]).data.astype(np.float64)
        if weight is None:
            return float(y.reshape(-1)[0])
        return float(np.sum(weight.astype(np.float64) * y))

    errors = []
    for k, a in enumerate(arrays):
        numeric = np.zeros(a.shape, dtype=np.float64)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            up = evaluate(arrays)
            a[idx] = orig - h
            down = evaluate(arrays)
            a[idx] = orig
            # the step actually taken in this precision
            span = float(np.asarray(orig + h, dtype=dtype)) - float(np.asarray(orig - h, dtype=dtype))
            numeric[idx] = (up - down) / span
        errors.append(relative_error(analytic[k], numeric))
    return errors
