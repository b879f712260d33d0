"""Adam optimizer with classic L2 weight decay.

Weight decay is folded into the gradient before the moment updates
(g <- g + wd * w), not decoupled. Hyperparameter defaults: lr 0.001,
wd 0.0005 (the training recipe), beta1 0.9, beta2 0.999, eps 1e-8.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0005
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params, lr: float = 0.001, weight_decay: float = 0.0005,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                      weight_decay=weight_decay)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(params, state: AdamState, allow_missing: bool = False) -> None:
    """One Adam update over `params` (list of Tensors), in place.

    By default every parameter must carry a gradient; a missing one
    means the graph was built wrong, so it is an error rather than a
    skip.  Ablation variants that leave a whole head out of the loss
    pass allow_missing=True, and those parameters stay frozen (no
    update, no decay, no moment change).
    """
    for i, p in enumerate(params):
        if p.grad is None and not allow_missing:
            raise ValueError(f"parameter {i} has no gradient; run backward first")
        if state.m[i].shape != p.data.shape:
            raise ValueError(f"optimizer state {i} is not shape-congruent with its parameter")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            continue
        g = p.grad
        if state.weight_decay != 0.0:
            g = g + state.weight_decay * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
