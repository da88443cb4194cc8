"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from premig.numerics.tensor import Tensor


def numeric_grad(loss_fn, params: list[Tensor], step: float = 1e-5) -> list[np.ndarray]:
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = float(loss_fn().data)
            flat[k] = orig - step
            down = float(loss_fn().data)
            flat[k] = orig
            gflat[k] = (up - down) / (2.0 * step)
        out.append(g)
    return out


def analytic_grad(loss_fn, params: list[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def max_relative_error(a: list[np.ndarray], b: list[np.ndarray], floor: float = 1e-7) -> float:
    """Worst |a-b| / max(|a|, |b|), ignoring entries whose |a-b| <= floor."""
    worst = 0.0
    for x, y in zip(a, b):
        diff = np.abs(x - y)
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), 1e-300)
        rel = np.where(diff <= floor, 0.0, diff / denom)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst


def check_gradients(loss_fn, params: list[Tensor], step: float = 1e-5, floor: float = 1e-7) -> float:
    """Return the worst relative disagreement between backprop and finite differences."""
    return max_relative_error(analytic_grad(loss_fn, params), numeric_grad(loss_fn, params, step), floor)
