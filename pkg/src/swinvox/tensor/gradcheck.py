"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Tape, Tensor


@dataclass
class EntryCheck:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(1.0, abs(self.analytic), abs(self.numeric))


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def check_entries(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    entries: Optional[Sequence[tuple]] = None,
    h: float = 1e-6,
    names: Optional[Sequence[str]] = None,
) -> list:
    """Compare analytic and central-difference derivatives entry by entry.

    ``f`` recomputes the scalar loss from the current contents of ``params``.
    ``entries`` is a list of ``(param_position, flat_index)``; by default
    every entry of every parameter is checked.
    """
    params = list(params)
    with Tape() as tape:
        loss = f()
    grads = tape.backward(loss)
    analytic = [grads[p].reshape(-1) for p in params]
    if entries is None:
        entries = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    results = []
    for i, j in entries:
        p = params[i]
        original = p.data
        flat = original.reshape(-1)
        plus, minus = flat.copy(), flat.copy()
        plus[j] += h
        minus[j] -= h
        try:
            p.data = plus.reshape(original.shape)
            f_plus = float(f().data)
            p.data = minus.reshape(original.shape)
            f_minus = float(f().data)
        finally:
            p.data = original
        numeric = (f_plus - f_minus) / (2 * h)
        name = names[i] if names is not None else (p.name or f"param{i}")
        index = tuple(int(k) for k in np.unravel_index(j, original.shape))
        results.append(EntryCheck(name, index, float(analytic[i][j]), numeric))
    return results


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    entries: Optional[Sequence[tuple]] = None,
) -> float:
    """Max over checked entries of ``|a - n| / max(1, |a|, |n|)``."""
    checks = check_entries(f, params, entries=entries, h=h)
    return max((c.rel_error for c in checks), default=0.0)
