"""Dense and LSTM building blocks on top of :mod:`premig.numerics.tensor`."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from premig.numerics.tensor import ContractViolation, Tensor, as_tensor, concat


def _param(a) -> Tensor:
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


@dataclass
class DenseLayerParams:
    weights: Tensor  # (..., out, in)
    bias: Tensor  # (..., out)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[-1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[-2]

    def tensors(self) -> dict:
        return {"weights": self.weights, "bias": self.bias}


@dataclass
class LstmCellParams:
    W_f: Tensor
    W_i: Tensor
    W_C: Tensor
    W_o: Tensor
    b_f: Tensor
    b_i: Tensor
    b_C: Tensor
    b_o: Tensor

    def __post_init__(self):
        hidden = self.b_f.shape[-1]
        for f in fields(self):
            t = getattr(self, f.name)
            if f.name.startswith("W") and (t.shape[-2] != hidden or t.shape[-1] != self.W_f.shape[-1]):
                raise ContractViolation(f"{f.name} has shape {t.shape}, inconsistent with W_f")
            if f.name.startswith("b") and t.shape[-1] != hidden:
                raise ContractViolation(f"{f.name} has shape {t.shape}, expected hidden={hidden}")

    @property
    def hidden(self) -> int:
        return self.b_f.shape[-1]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[-1] - self.hidden

    def tensors(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def init_dense(rng: np.random.Generator, in_dim: int, out_dim: int,
               lead: tuple = (), scale: float = 1.0) -> DenseLayerParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias.

    ``lead`` prepends stacking axes (e.g. one slice per agent).
    """
    bound = scale / np.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=lead + (out_dim, in_dim))
    return DenseLayerParams(_param(w), _param(np.zeros(lead + (out_dim,))))


def zero_dense(in_dim: int, out_dim: int, lead: tuple = ()) -> DenseLayerParams:
    return DenseLayerParams(_param(np.zeros(lead + (out_dim, in_dim))),
                            _param(np.zeros(lead + (out_dim,))))


def init_lstm(rng: np.random.Generator, input_dim: int, hidden: int,
              forget_bias: float = 1.0) -> LstmCellParams:
    fan_in = hidden + input_dim
    bound = 1.0 / np.sqrt(fan_in)
    ws = {k: _param(rng.uniform(-bound, bound, size=(hidden, fan_in)))
          for k in ("W_f", "W_i", "W_C", "W_o")}
    bs = {k: _param(np.zeros(hidden)) for k in ("b_i", "b_C", "b_o")}
    bs["b_f"] = _param(np.full(hidden, forget_bias))
    return LstmCellParams(**ws, **bs)


def zero_lstm(input_dim: int, hidden: int) -> LstmCellParams:
    fan_in = hidden + input_dim
    return LstmCellParams(
        **{k: _param(np.zeros((hidden, fan_in))) for k in ("W_f", "W_i", "W_C", "W_o")},
        **{k: _param(np.zeros(hidden)) for k in ("b_f", "b_i", "b_C", "b_o")})


def dense_forward(p: DenseLayerParams, x) -> Tensor:
    """W.x + b over the last axis of ``x``; leading axes broadcast."""
    x = as_tensor(x)
    if x.shape[-1] != p.in_dim:
        raise ContractViolation(f"dense input has {x.shape[-1]} features, layer expects {p.in_dim}")
    if x.ndim == 1:
        return (p.weights @ x.reshape(-1, 1)).reshape(-1) + p.bias
    b = p.bias.reshape(*p.bias.shape[:-1], 1, p.bias.shape[-1])
    return x @ p.weights.T + b


def lstm_cell(p: LstmCellParams, x_t, h_prev, C_prev):
    """One step of the gated recurrence; returns ``(h_t, C_t)``.

    Inputs may carry a leading batch axis; the gate pre-activations all read
    the concatenation ``[h_prev, x_t]``.
    """
    x_t, h_prev, C_prev = as_tensor(x_t), as_tensor(h_prev), as_tensor(C_prev)
    if x_t.shape[-1] != p.input_dim or h_prev.shape[-1] != p.hidden or C_prev.shape[-1] != p.hidden:
        raise ContractViolation(
            f"lstm_cell got x{x_t.shape}, h{h_prev.shape}, C{C_prev.shape} for "
            f"input_dim={p.input_dim}, hidden={p.hidden}")
    hx = concat([h_prev, x_t], axis=-1)
    f_t = dense_forward(DenseLayerParams(p.W_f, p.b_f), hx).sigmoid()
    i_t = dense_forward(DenseLayerParams(p.W_i, p.b_i), hx).sigmoid()
    c_tilde = dense_forward(DenseLayerParams(p.W_C, p.b_C), hx).tanh()
    o_t = dense_forward(DenseLayerParams(p.W_o, p.b_o), hx).sigmoid()
    C_t = f_t * C_prev + i_t * c_tilde
    h_t = o_t * C_t.tanh()
    return h_t, C_t


def mlp_forward(layers, x, activation: str = "tanh") -> Tensor:
    """Apply ``layers`` with ``activation`` between them (not after the last)."""
    h = as_tensor(x)
    for k, layer in enumerate(layers):
        h = dense_forward(layer, h)
        if k < len(layers) - 1:
            h = getattr(h, activation)()
    return h
