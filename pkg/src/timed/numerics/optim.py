"""Bias-corrected Adam over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float = 1e-3, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, Tensor | np.ndarray]) -> None:
    """Apply one Adam update to ``params`` in place."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"adam_step: no gradient for parameter(s) {missing}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if m.shape != p.data.shape:
            raise ValueError(f"adam_step: moment shape {m.shape} != parameter shape {p.data.shape} for {name}")
        dt = p.data.dtype.type
        m *= dt(state.beta1)
        m += dt(1.0 - state.beta1) * g
        v *= dt(state.beta2)
        v += dt(1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / dt(bc2)) + dt(state.eps)
        p.data -= dt(state.lr / bc1) * m / denom
