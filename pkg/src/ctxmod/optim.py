"""Adam optimizer over :class:`~ctxmod.tensor.Tensor` parameters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TapeError
from .tensor import Tensor


@dataclass
class AdamState:
    """Moment estimates for one optimizer; ``m``/``v`` are keyed like the params."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    masks: dict[str, np.ndarray] | None = None,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Only parameters with ``requires_grad`` are updated; a learnable parameter
    with no gradient is an error.  ``masks`` optionally restricts the update
    to a boolean subset of a tensor's elements (the rest stay bit-identical).
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads.get(name)
        if g is None:
            raise TapeError(f"adam_step: learnable parameter {name!r} has no gradient")
        if g.shape != p.shape:
            raise TapeError(f"adam_step: gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
        mask = None if masks is None else masks.get(name)
        if mask is not None:
            update = np.where(mask, update, np.zeros((), p.dtype))
        p.data -= update
    return state


class Adam:
    """Stateful wrapper: ``opt.step()`` reads ``.grad`` off each parameter."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 masks: dict[str, np.ndarray] | None = None):
        self.params = params
        self.masks = masks or {}
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.requires_grad}
        adam_step(self.params, grads, self.state, self.masks)
