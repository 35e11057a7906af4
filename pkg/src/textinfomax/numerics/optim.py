"""Adam with L2 weight decay folded into the gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import DimensionError
from .tensor import NumericError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam update in place.

    Weight decay is the classic L2 form: ``wd * param`` is added to the
    gradient before the moment estimates are updated. A missing gradient is
    treated as zero so every parameter still advances with the step counter.
    """
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    updates = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise DimensionError(f"optimizer moments for {name} do not match parameter shape")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = (p.data - step).astype(p.dtype, copy=False)
        if not np.isfinite(new).all():
            raise NumericError(f"Adam produced non-finite values for {name} at step {t}")
        updates[name] = (new, m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False))
    # commit only after every parameter passed the finite check
    for name, (new, m, v) in updates.items():
        params[name].data = new
        state.m[name] = m
        state.v[name] = v
    state.step = t
    return state


class Adam:
    """Thin stateful wrapper over :func:`adam_step` for a named parameter set."""

    def __init__(self, params: dict[str, Tensor], lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)
