"""Adam optimizer with bias-corrected moment estimates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet
from .tensor import ShapeError


class TrainingDivergedError(FloatingPointError):
    """A loss became NaN or infinite."""


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, p in params.items():
            if params.trainable[name]:
                state.m[name] = np.zeros_like(p.data)
                state.v[name] = np.zeros_like(p.data)
        return state

    def hyper(self) -> dict:
        return {"learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "epsilon": self.epsilon, "t": self.t}


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One in-place Adam update of every trainable parameter.

    Frozen parameters are skipped even when a gradient is supplied. A
    trainable parameter without an entry in ``grads`` sees a zero gradient.
    """
    for name, g in grads.items():
        if name in params and params.trainable[name] and g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if not params.trainable[name]:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)
