"""Named parameter collections and weight initializers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor


class ParamSet:
    """Ordered trainable parameters plus non-trainable buffers.

    Parameters are leaf :class:`Tensor` objects; buffers (batch-norm running
    statistics) are plain arrays updated in place by the layers owning them.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.trainable: dict[str, bool] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _check_name(self, name: str) -> None:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        self._check_name(name)
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=trainable, name=name)
        self.params[name] = t
        self.trainable[name] = trainable
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._check_name(name)
        arr = np.array(value, dtype=self.dtype)
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def names(self) -> list[str]:
        return list(self.params)

    def set_trainable(self, flag: bool, prefix: str = "") -> None:
        """Mark every parameter whose name starts with ``prefix``."""
        for name, p in self.params.items():
            if name.startswith(prefix):
                self.trainable[name] = flag
                p.requires_grad = flag

    def count(self, include_buffers: bool = True) -> int:
        n = sum(p.data.size for p in self.params.values())
        if include_buffers:
            n += sum(b.size for b in self.buffers.values())
        return n

    def count_trainable(self) -> int:
        return sum(p.data.size for name, p in self.params.items() if self.trainable[name])

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, parameters first."""
        out = {name: p.data.copy() for name, p in self.params.items()}
        out.update({name: b.copy() for name, b in self.buffers.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, p in self.params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name!r}")
                continue
            self._copy_into(name, p.data, state[name])
        for name, b in self.buffers.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing buffer {name!r}")
                continue
            self._copy_into(name, b, state[name])

    @staticmethod
    def _copy_into(name: str, dst: np.ndarray, src: np.ndarray) -> None:
        src = np.asarray(src)
        if src.shape != dst.shape:
            raise ValueError(f"shape mismatch for {name!r}: {src.shape} vs {dst.shape}")
        dst[...] = src

    def snapshot_bytes(self) -> dict[str, bytes]:
        """Raw bytes of every tensor, for bitwise audits."""
        return {k: v.tobytes() for k, v in self.state_dict().items()}


def normal_init(rng: np.random.Generator, shape, stddev: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, stddev, size=shape)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
