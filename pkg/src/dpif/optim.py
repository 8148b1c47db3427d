"""First-order optimizers updating :class:`Parameter` data in place."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from dpif.tensor import Parameter

OPTIMIZERS = ("sgd", "adam")
ALIASES = {"adaptive-moment": "adam"}


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    def __post_init__(self):
        object.__setattr__(self, "kind", ALIASES.get(self.kind, self.kind))
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"optimizer kind must be one of {OPTIMIZERS}, got {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


@dataclass
class OptimizerState:
    """Step counter plus first/second moment buffers keyed by parameter name."""

    step: int = 0
    m: dict[str, np.ndarray] | None = None
    v: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        self.m = {} if self.m is None else self.m
        self.v = {} if self.v is None else self.v


def optimizer_step(params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray],
                   state: OptimizerState, config: OptimizerConfig) -> OptimizerState:
    """Apply one update to every trainable parameter in ``params``.

    Raises KeyError when a trainable parameter has no gradient.
    """
    trainable = {name: p for name, p in params.items() if p.trainable}
    missing = sorted(set(trainable) - set(grads))
    if missing:
        raise KeyError(f"missing gradient for trainable parameter(s): {', '.join(missing)}")
    state.step += 1
    lr = config.lr
    if config.kind == "sgd":
        for name in sorted(trainable):
            p = trainable[name]
            p.data -= (lr * grads[name]).astype(p.dtype)
        return state

    b1, b2, eps, t = config.beta1, config.beta2, config.eps, state.step
    lr_t = lr * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    for name in sorted(trainable):
        p = trainable[name]
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        p.data -= (lr_t * state.m[name] / (np.sqrt(state.v[name]) + eps)).astype(p.dtype)
    return state
