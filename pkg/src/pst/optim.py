"""Adam optimizer with bias correction.

State is keyed by parameter name so checkpoint/optimizer pairs stay aligned
across runs regardless of how the model dataclasses are nested.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, Param


@dataclass
class AdamConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    named: list[tuple[str, Param]]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def __post_init__(self):
        for name, p in self.named:
            self.m.setdefault(name, np.zeros(p.shape, dtype=p.value.dtype))
            self.v.setdefault(name, np.zeros(p.shape, dtype=p.value.dtype))


def adam_init(named_params: list[tuple[str, Param]]) -> AdamState:
    return AdamState(list(named_params))


def adam_step(state: AdamState, cfg: AdamConfig) -> None:
    """One update: p -= lr * m_hat / (sqrt(v_hat) + eps).

    Gradients must be finite; a non-finite gradient aborts with the
    offending parameter's name. Missing gradients count as zero.
    """
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in state.named:
        if not p.trainable:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.assign(p.value.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps))
