"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_record


@dataclass
class GradcheckResult:
    name: str
    rel_error: float
    checked: int

    def passed(self, tol: float) -> bool:
        return self.rel_error <= tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
              max_entries: int | None = None, seed: int = 0, name: str = "") -> GradcheckResult:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    ``fn`` must rebuild the graph from the current values in ``params``.
    With ``max_entries`` set, only that many randomly chosen coordinates per
    parameter are perturbed.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    rng = np.random.default_rng(seed)

    analytic, numeric = [], []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat) if p.grad is None else p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            with no_record():
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
            flat[i] = orig
            numeric.append((fp - fm) / (2 * h))
            analytic.append(g[i])
    return GradcheckResult(name, relative_error(np.array(analytic), np.array(numeric)), len(numeric))
