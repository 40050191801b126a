"""Tensor container and the gradient tape that records operations on it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Row-major N-d array with an optional gradient buffer.

    ``data`` is always a contiguous numpy array; ``grad`` is filled by
    :func:`backward` for leaf tensors that require gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class GradTape:
    """Records differentiable operations in execution order.

    Use as a context manager; every op whose inputs require gradients is
    appended to each active tape.
    """

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def gradient(self, loss: Tensor, params=None):
        return backward(self, loss, params)


_ACTIVE: list[GradTape] = []


def recording() -> bool:
    return bool(_ACTIVE)


def make_output(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as an op output and record it when gradients are needed."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs and recording(), dtype=data.dtype)
    if out.requires_grad:
        rec = Record(tuple(inputs), out, backward_fn)
        for tape in _ACTIVE:
            tape.records.append(rec)
    return out


def backward(tape: GradTape, loss: Tensor, params=None):
    """Reverse-mode sweep over ``tape`` starting from scalar ``loss``.

    Leaf tensors reached by the sweep get ``.grad`` assigned (overwriting
    any previous value). When ``params`` (a ParamSet) is given, returns a
    dict of gradients for every trainable parameter; parameters the loss
    does not depend on get exact zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        leaves[id(loss)] = loss
    for rec in reversed(tape.records):
        produced.add(id(rec.output))
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            leaves.setdefault(key, inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, g in grads.items():
        if key in produced or key not in leaves:
            continue
        leaf = leaves[key]
        leaf.grad = g.astype(leaf.dtype, copy=False)
    if params is None:
        return None
    out = {}
    for name, p in params.items():
        if not params.trainable[name]:
            continue
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else g.astype(p.dtype, copy=False)
    return out
