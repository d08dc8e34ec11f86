"""Adam update over a name -> Tensor parameter mapping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError, NumericError


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> dict[str, Tensor]:
    """Return a new parameter mapping after one bias-corrected Adam step.

    ``state`` is advanced in place. Input tensors are left untouched; callers
    swap in the returned mapping.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        updated[name] = Tensor(p.data - step, requires_grad=p.requires_grad, name=name, _copy=False)
    return updated
