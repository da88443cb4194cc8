"""Tape-based reverse-mode differentiation over numpy float64 arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure pushing the upstream gradient back to them. ``Tensor.backward`` walks
the recorded graph in reverse topological order.
"""
from __future__ import annotations

import numpy as np
from scipy import special


class ContractViolation(ValueError):
    """Shape or usage error in the numeric kernel."""


def _unbroadcast(grad, shape):
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- basics -----------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``.

        Only scalar outputs may be differentiated without an explicit seed.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation(
                    f"backward() needs a scalar loss, got shape {self.data.shape}")
            grad = np.ones_like(self.data)
        order, seen = [], set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                n, done = stack.pop()
                if done:
                    order.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.data.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        return Tensor(self.data + other.data, _parents=(self, other),
                      _backward=lambda g: (g, g))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _backward=lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other)
        return Tensor(self.data - other.data, _parents=(self, other),
                      _backward=lambda g: (g, -g))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor(a * b, _parents=(self, other),
                      _backward=lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor(a / b, _parents=(self, other),
                      _backward=lambda g: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, k: float):
        a = self.data
        return Tensor(a ** k, _parents=(self,),
                      _backward=lambda g: (g * k * a ** (k - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ContractViolation("matmul operands must be at least 2-D")
        if a.shape[-1] != b.shape[-2]:
            raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}")

        def back(g):
            return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g

        return Tensor(a @ b, _parents=(self, other), _backward=back)

    # -- shape ops --------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                      _parents=(self,), _backward=back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.data.shape
        return Tensor(self.data.reshape(*shape), _parents=(self,),
                      _backward=lambda g: (g.reshape(old),))

    def swapaxes(self, a1, a2):
        return Tensor(np.swapaxes(self.data, a1, a2), _parents=(self,),
                      _backward=lambda g: (np.swapaxes(g, a1, a2),))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def __getitem__(self, idx):
        shape = self.data.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor(self.data[idx], _parents=(self,), _backward=back)

    # -- elementwise nonlinearities ----------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * out,))

    def log(self):
        a = self.data
        return Tensor(np.log(a), _parents=(self,), _backward=lambda g: (g / a,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * (1.0 - out * out),))

    def sigmoid(self):
        out = special.expit(self.data)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * out * (1.0 - out),))

    def relu(self):
        mask = self.data > 0
        return Tensor(self.data * mask, _parents=(self,), _backward=lambda g: (g * mask,))

    def softplus(self):
        a = self.data
        return Tensor(np.logaddexp(0.0, a), _parents=(self,),
                      _backward=lambda g: (g * special.expit(a),))

    def lgamma(self):
        a = self.data
        return Tensor(special.gammaln(a), _parents=(self,),
                      _backward=lambda g: (g * special.digamma(a),))

    def digamma(self):
        a = self.data
        return Tensor(special.digamma(a), _parents=(self,),
                      _backward=lambda g: (g * special.polygamma(1, a),))

    def clip(self, lo: float, hi: float):
        a = self.data
        inside = (a >= lo) & (a <= hi)
        return Tensor(np.clip(a, lo, hi), _parents=(self,),
                      _backward=lambda g: (g * inside,))

    def log_softmax(self, axis=-1):
        a = self.data
        shifted = a - a.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        p = np.exp(out)

        def back(g):
            return (g - p * g.sum(axis=axis, keepdims=True),)

        return Tensor(out, _parents=(self,), _backward=back)


# -- free functions ------------------------------------------------------------

def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  _parents=tuple(tensors), _backward=back)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return Tensor(np.where(pick_a, a.data, b.data), _parents=(a, b),
                  _backward=lambda g: (g * pick_a, g * ~pick_a))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return Tensor(np.where(pick_a, a.data, b.data), _parents=(a, b),
                  _backward=lambda g: (g * pick_a, g * ~pick_a))


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor(np.where(cond, a.data, b.data), _parents=(a, b),
                  _backward=lambda g: (g * cond, g * ~cond))


def take_along(t: Tensor, idx: np.ndarray, axis=-1) -> Tensor:
    """``np.take_along_axis`` with gradient scattering back to ``t``."""
    idx = np.asarray(idx)
    shape = t.data.shape

    def back(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, g, axis=axis)
        return (out,)

    return Tensor(np.take_along_axis(t.data, idx, axis=axis), _parents=(t,), _backward=back)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor(np.stack([t.data for t in tensors], axis=axis),
                  _parents=tuple(tensors), _backward=back)
