"""Adam optimiser with bias-corrected moment estimates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence, **hyper) -> "AdamState":
        arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls(first_moment=[np.zeros_like(a) for a in arrays],
                   second_moment=[np.zeros_like(a) for a in arrays], **hyper)


def adam_step(state: AdamState, params: Sequence[np.ndarray],
              grads: Sequence[Optional[np.ndarray]]) -> AdamState:
    """Apply one Adam update to ``params`` in place and advance ``state``.

    Raises ``ValueError`` if any gradient is missing.
    """
    if len(params) != len(state.first_moment):
        raise ValueError(f"optimizer tracks {len(state.first_moment)} params, got {len(params)}")
    for i, g in enumerate(grads):
        if g is None:
            raise ValueError(f"missing gradient for tracked parameter {i}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    """Stateful wrapper stepping a fixed list of tensors from their ``.grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=betas[0],
                                          beta2=betas[1], eps=eps)

    def step(self) -> None:
        adam_step(self.state, [p.data for p in self.params], [p.grad for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
