"""Bias-corrected Adam over named parameter sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradientMap, Tensor
from .errors import ContractError


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _lookup(grads, name, param):
    if isinstance(grads, GradientMap):
        g = grads.get(param) if isinstance(param, Tensor) and param.tape_id is not None else None
    else:
        g = grads.get(name)
    if g is None:
        raise ContractError(f"no gradient for parameter {name!r}")
    return g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)


def adam_step(params: dict, grads, state: AdamState, lr: float, *, requires_grad: bool | None = None):
    """One Adam update.

    ``params`` maps names to tensors; ``grads`` is either a GradientMap from
    :func:`backward` or a plain name -> array mapping (the zero-order path).
    Returns ``(new_params, state)``; the state is updated in place.  New
    parameter tensors keep the ``requires_grad`` flag of the old ones unless
    overridden.
    """
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    out = {}
    for name, p in params.items():
        g = _lookup(grads, name, p)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        rg = p.requires_grad if requires_grad is None else requires_grad
        out[name] = Tensor(p.data - update, requires_grad=rg)
    return out, state
