"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

# Relative error is |a - n| / max(|a|, |n|, FLOOR). The floor keeps entries
# whose true gradient is ~0 (dead ReLUs, tiny weights) from dominating with
# pure round-off; at h=1e-5 the difference quotient carries ~1e-10 noise.
REL_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5, max_entries: int | None = None,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of ``f`` with respect to entries of ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
    out = np.empty(idx.size)
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * h)
    return idx, out


def grad_check(net, x: np.ndarray, tolerance: float = 1e-4, h: float = 1e-5, seed: int = 0,
               max_entries: int | None = 200, backward_fn=None) -> GradCheckReport:
    """Compare ``net.backward`` against central differences.

    The scalar loss is sum(y * R) for a fixed random R, which exercises every
    output. ``backward_fn`` can replace ``net.backward`` (used to inject faults).
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    y, cache = net.forward(x)
    r = rng.standard_normal(y.shape)
    grads, gx = (backward_fn or net.backward)(cache, r)

    def loss() -> float:
        return float(np.sum(net.forward(x)[0] * r))

    worst, count = 0.0, 0
    for p, g in zip(net.params, grads):
        idx, num = numeric_grad(loss, p, h, max_entries, rng)
        worst = max(worst, float(rel_error(g.reshape(-1)[idx], num).max(initial=0.0)))
        count += idx.size
    idx, num = numeric_grad(loss, x, h, max_entries, rng)
    worst = max(worst, float(rel_error(gx.reshape(-1)[idx], num).max(initial=0.0)))
    count += idx.size
    return GradCheckReport(worst, count, tolerance)
