"""Adam and AdamW over ``Parameter`` collections."""

from dataclasses import dataclass, field

import numpy as np

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, weight_decay=0.0, decoupled=False,
              betas=(BETA1, BETA2), eps=EPS):
    """One bias-corrected Adam update, in place on ``params`` (name -> array).

    With ``decoupled=True`` (AdamW) each parameter is first shrunk by
    ``lr * weight_decay``; a zero decay skips that multiply entirely so
    AdamW and Adam agree bit-for-bit.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {value.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if decoupled and weight_decay != 0.0:
            value *= 1.0 - lr * weight_decay
        value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    """Optimizer over a ``name -> Parameter`` mapping.

    Parameters
    ----------
    params : dict
    lr : float
    weight_decay : float
        Only used when ``decoupled`` is set (AdamW).
    decoupled : bool
    """

    def __init__(self, params, lr=1e-3, weight_decay=0.0, decoupled=False):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.state = AdamState()

    def step(self):
        values = {k: p.value for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items()}
        adam_step(values, grads, self.state, self.lr, self.weight_decay, self.decoupled)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def make_optimizer(name, params, lr, weight_decay=1e-2):
    if name == "adam":
        return Adam(params, lr)
    if name == "adamw":
        return Adam(params, lr, weight_decay, decoupled=True)
    raise ValueError(f"unknown optimizer {name!r}")
