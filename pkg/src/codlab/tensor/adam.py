"""Adam with bias correction plus the cosine-annealing learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Tensor


@dataclass
class AdamState:
    """Per-parameter moment buffers and the schedule constants.

    The cosine schedule swings between lr_min and lr_max with the given
    period (in epochs), restarting each cycle.
    """

    lr_min: float = 1e-5
    lr_max: float = 1e-4
    period: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def cosine_lr(epoch: float, lr_min: float, lr_max: float, period: int) -> float:
    """lr_min + (lr_max - lr_min) * (1 + cos(pi * t/period)) / 2, restarting."""
    t = epoch % period
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / period))


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One in-place Adam update; a parameter with grad None is treated as zero-grad."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
