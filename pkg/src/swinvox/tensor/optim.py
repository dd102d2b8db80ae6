"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, PoisonedGradientError


@dataclass
class AdamWState:
    """Moments for one parameter plus the shared hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamWState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamWState, name: str = None):
    """Return the updated parameter array; ``state`` is advanced in place.

    The decay ``param * (1 - lr * weight_decay)`` is applied before, and
    independently of, the bias-corrected moment update.
    """
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise DimensionError(
            f"adamw shapes disagree: param {param.shape}, grad {grad.shape}, moments {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise PoisonedGradientError(f"non-finite gradient for {name or 'parameter'}", name=name)
    dtype = param.dtype.type
    b1, b2 = dtype(state.beta1), dtype(state.beta2)
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    corr1 = dtype(1.0 - state.beta1 ** state.t)
    corr2 = dtype(1.0 - state.beta2 ** state.t)
    decayed = param * dtype(1.0 - state.lr * state.weight_decay)
    step = dtype(state.lr) * (state.m / corr1) / (np.sqrt(state.v / corr2) + dtype(state.eps))
    return (decayed - step).astype(param.dtype, copy=False)


@dataclass
class AdamW:
    """Optimizer over a name -> array mapping of parameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    states: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                    weight_decay=self.weight_decay)

    def step(self, params: dict, grads: dict) -> dict:
        """Update every array in ``params`` from ``grads``; returns new arrays by name."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise PoisonedGradientError(f"non-finite gradient for {name}", name=name)
        out = {}
        for name, p in params.items():
            state = self.states.get(name)
            if state is None:
                state = self.states[name] = AdamWState.zeros_like(p, **self.hyper())
            out[name] = adamw_step(p, grads[name], state, name=name)
        return out
