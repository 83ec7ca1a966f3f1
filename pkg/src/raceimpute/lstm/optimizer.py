"""Adam with bias correction over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """First/second moment accumulators and step counter, keyed like params."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adam_step(
    params: dict[str, np.ndarray],
    state: AdamState,
    grads: dict[str, np.ndarray],
    learning_rate: float,
) -> None:
    """One in-place bias-corrected Adam update; increments the step counter."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for key, g in grads.items():
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (learning_rate / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        params[key] -= step
