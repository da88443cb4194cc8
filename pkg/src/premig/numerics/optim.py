"""Adam with bias-corrected moments."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from premig.numerics.tensor import ContractViolation, Tensor

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    skipped: int = 0

    @classmethod
    def for_params(cls, params, **kw) -> "OptimizerState":
        st = cls(**kw)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def optimizer_step(state: OptimizerState, params: list[Tensor], grads=None) -> bool:
    """Update ``params`` in place. Returns False if the step was skipped.

    ``grads`` defaults to each parameter's ``.grad`` (missing grads count as
    zero). A non-finite gradient anywhere skips the whole update.
    """
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ContractViolation("optimizer state, params and grads must align")
    for p, g in zip(params, grads):
        if np.shape(g) != p.data.shape:
            raise ContractViolation(f"gradient shape {np.shape(g)} != param shape {p.data.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped", state.step + 1)
        return False

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        p.data = p.data - state.step_size * (state.m[k] / corr1) / (np.sqrt(state.v[k] / corr2) + state.eps)
    return True
