"""Sampling and log-likelihoods for the discrete and bounded-continuous heads."""
from __future__ import annotations

import numpy as np
from scipy import special

from premig.numerics.tensor import Tensor, as_tensor, take_along

MASKED_LOGIT = -1e9
# Beta draws are kept this far away from {0, 1} so log-densities stay finite.
BETA_EDGE = 1e-6


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax; ``-inf`` entries stay ``-inf``."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def categorical_sample(logits, rng: np.random.Generator):
    """Draw one index from ``softmax(logits)``; returns ``(index, log_prob)``."""
    logp = log_softmax(logits)
    p = np.exp(logp)
    idx = int(rng.choice(len(p), p=p / p.sum()))
    return idx, float(logp[idx])


def bounded_sample(alpha: float, beta: float, rng: np.random.Generator):
    """Draw from Beta(alpha, beta); returns ``(value, log_density)``."""
    x = float(np.clip(rng.beta(alpha, beta), BETA_EDGE, 1.0 - BETA_EDGE))
    return x, float(beta_log_density(alpha, beta, x))


def beta_log_density(alpha, beta, x):
    alpha, beta, x = (np.asarray(v, dtype=np.float64) for v in (alpha, beta, x))
    return ((alpha - 1.0) * np.log(x) + (beta - 1.0) * np.log1p(-x)
            - special.betaln(alpha, beta))


# -- differentiable counterparts -----------------------------------------------

def masked_logits(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Push invalid entries to ``MASKED_LOGIT`` (mask True = allowed)."""
    mask = np.asarray(mask, dtype=bool)
    return logits * mask + MASKED_LOGIT * (~mask)


def categorical_log_prob(logits: Tensor, index: np.ndarray) -> Tensor:
    logp = as_tensor(logits).log_softmax(axis=-1)
    return take_along(logp, np.asarray(index)[..., None], axis=-1).reshape(*np.shape(index))


def categorical_entropy(logits: Tensor) -> Tensor:
    logp = as_tensor(logits).log_softmax(axis=-1)
    return -(logp.exp() * logp).sum(axis=-1)


def beta_log_prob(alpha: Tensor, beta: Tensor, x) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    alpha, beta = as_tensor(alpha), as_tensor(beta)
    log_b = alpha.lgamma() + beta.lgamma() - (alpha + beta).lgamma()
    return (alpha - 1.0) * np.log(x) + (beta - 1.0) * np.log1p(-x) - log_b


def beta_entropy(alpha: Tensor, beta: Tensor) -> Tensor:
    alpha, beta = as_tensor(alpha), as_tensor(beta)
    total = alpha + beta
    log_b = alpha.lgamma() + beta.lgamma() - total.lgamma()
    return (log_b - (alpha - 1.0) * alpha.digamma() - (beta - 1.0) * beta.digamma()
            + (total - 2.0) * total.digamma())
