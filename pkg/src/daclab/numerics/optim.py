"""SGD and Adam over a ParameterSet."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import GradientError
from .params import ParameterSet


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")


def optimizer_step(params: ParameterSet, state: OptimizerState) -> ParameterSet:
    """Apply one update in place. Gradients are left for the caller to reset."""
    missing = [k for k in params if params[k].grad is None]
    if missing:
        raise GradientError(f"optimizer_step: no gradient for {', '.join(missing)}")
    state.step += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        for k in params:
            p = params[k]
            p.data -= p.dtype.type(lr) * p.grad
        return params

    b1, b2, eps, t = state.beta1, state.beta2, state.eps, state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for k in params:
        p = params[k]
        g = p.grad
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        p.data -= update.astype(p.dtype, copy=False)
    return params
