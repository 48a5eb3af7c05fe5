"""Reverse-mode automatic differentiation on a small closed set of primitives.

Values are float64 numpy arrays. Every operation records its inputs and a
backward closure on an implicit tape (the DAG of Tensor nodes); calling
``backward()`` on a scalar loss replays the tape in reverse topological
order. The primitive set is deliberately tiny: it is exactly what the
transformer variants in this package need, nothing more.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class GradientError(RuntimeError):
    """Raised when a non-finite value contaminates the backward pass."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation DAG. Immutable value, accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph construction helpers -------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _accumulate(self, g: np.ndarray, child_op: str) -> None:
        if not self.requires_grad:
            return
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient flowing into '{self.op}' from '{child_op}'")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if not np.all(np.isfinite(self.data)):
            raise GradientError(f"loss produced by '{self.op}' is not finite")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.requires_grad and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- primitives -------------------------------------------------------

    def __add__(self, other):
        a, b = self, Tensor._lift(other)
        out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad,
                     "add", (a, b))

        def bwd(g):
            a._accumulate(_unbroadcast(g, a.data.shape), "add")
            b._accumulate(_unbroadcast(g, b.data.shape), "add")
        out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        a, b = self, Tensor._lift(other)
        out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad,
                     "mul", (a, b))

        def bwd(g):
            a._accumulate(_unbroadcast(g * b.data, a.data.shape), "mul")
            b._accumulate(_unbroadcast(g * a.data, b.data.shape), "mul")
        out._backward = bwd
        return out

    __rmul__ = __mul__

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self, Tensor._lift(other)
        if a.data.ndim == 0 or b.data.ndim == 0:
            raise ValueError("matmul requires arrays, not scalars")
        if a.data.shape[-1] != b.data.shape[0]:
            raise ValueError(
                f"matmul dimension mismatch: {a.data.shape} @ {b.data.shape}")
        out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad,
                     "matmul", (a, b))

        def bwd(g):
            ad, bd = a.data, b.data
            if ad.ndim == 1 and bd.ndim == 1:
                a._accumulate(g * bd, "matmul")
                b._accumulate(g * ad, "matmul")
            elif bd.ndim == 1:
                a._accumulate(np.outer(g, bd) if ad.ndim == 2 else g * bd, "matmul")
                b._accumulate(ad.T @ g, "matmul")
            elif ad.ndim == 1:
                a._accumulate(g @ bd.T, "matmul")
                b._accumulate(np.outer(ad, g), "matmul")
            else:
                a._accumulate(g @ bd.T, "matmul")
                b._accumulate(ad.T @ g, "matmul")
        out._backward = bwd
        return out

    __matmul__ = matmul

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0.0), self.requires_grad, "relu", (self,))

        def bwd(g):
            self._accumulate(g * (self.data > 0.0), "relu")
        out._backward = bwd
        return out

    def exp(self) -> "Tensor":
        out = Tensor(np.exp(self.data), self.requires_grad, "exp", (self,))

        def bwd(g):
            self._accumulate(g * out.data, "exp")
        out._backward = bwd
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), self.requires_grad, "log", (self,))

        def bwd(g):
            self._accumulate(g / self.data, "log")
        out._backward = bwd
        return out

    def transpose(self) -> "Tensor":
        out = Tensor(self.data.T, self.requires_grad, "transpose", (self,))

        def bwd(g):
            self._accumulate(g.T, "transpose")
        out._backward = bwd
        return out

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def sum(self, axis=None) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis), self.requires_grad, "sum", (self,))

        def bwd(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).copy(), "sum")
            else:
                self._accumulate(np.broadcast_to(np.expand_dims(g, axis),
                                                 self.data.shape).copy(), "sum")
        out._backward = bwd
        return out

    def mean(self, axis=None) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)


def masked_softmax(logits: Tensor | np.ndarray) -> Tensor:
    """Softmax over the last axis; -inf logits map to exactly zero weight.

    Computed with max-subtraction. A row whose logits are all -inf has no
    admissible outcome and is rejected.
    """
    t = Tensor._lift(logits)
    x = t.data
    m = np.max(x, axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise ValueError("masked_softmax: all logits are -inf (degenerate distribution)")
    if np.any(np.isposinf(x)) or np.any(np.isnan(x)):
        raise ValueError("masked_softmax: logits must be finite or -inf")
    e = np.exp(x - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, t.requires_grad, "masked_softmax", (t,))

    def bwd(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        gl = p * (g - inner)
        t._accumulate(gl, "masked_softmax")
    out._backward = bwd
    return out


def dot_last(keys: Tensor, query: Tensor) -> Tensor:
    """Contract (B, L, D) keys with (B, D) queries -> (B, L) scores."""
    k, q = Tensor._lift(keys), Tensor._lift(query)
    out = Tensor(np.einsum("bld,bd->bl", k.data, q.data),
                 k.requires_grad or q.requires_grad, "dot_last", (k, q))

    def bwd(g):
        k._accumulate(np.einsum("bl,bd->bld", g, q.data), "dot_last")
        q._accumulate(np.einsum("bl,bld->bd", g, k.data), "dot_last")
    out._backward = bwd
    return out


def linear_last(values: Tensor, weight: Tensor) -> Tensor:
    """Apply a (E, D) map over the last axis of (B, L, D) -> (B, L, E)."""
    v, w = Tensor._lift(values), Tensor._lift(weight)
    out = Tensor(np.einsum("bld,ed->ble", v.data, w.data),
                 v.requires_grad or w.requires_grad, "linear_last", (v, w))

    def bwd(g):
        v._accumulate(np.einsum("ble,ed->bld", g, w.data), "linear_last")
        w._accumulate(np.einsum("ble,bld->ed", g, v.data), "linear_last")
    out._backward = bwd
    return out


def weighted_sum(values: Tensor, weights: Tensor) -> Tensor:
    """Contract (B, L, D) values with (B, L) weights -> (B, D)."""
    v, w = Tensor._lift(values), Tensor._lift(weights)
    out = Tensor(np.einsum("bld,bl->bd", v.data, w.data),
                 v.requires_grad or w.requires_grad, "weighted_sum", (v, w))

    def bwd(g):
        v._accumulate(np.einsum("bd,bl->bld", g, w.data), "weighted_sum")
        w._accumulate(np.einsum("bd,bld->bl", g, v.data), "weighted_sum")
    out._backward = bwd
    return out


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    ts = [Tensor._lift(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in ts]), any(t.requires_grad for t in ts),
                 "stack_rows", tuple(ts))

    def bwd(g):
        for i, t in enumerate(ts):
            t._accumulate(g[i], "stack_rows")
    out._backward = bwd
    return out


def grad(loss_fn: Callable[..., Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar-valued loss with respect to `params`.

    `loss_fn` must be built from the registered primitives; any non-finite
    value surfacing in the backward pass raises GradientError naming the
    offending node.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn(*params)
    if not isinstance(loss, Tensor):
        raise TypeError("loss_fn must return a Tensor")
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def finite_difference(loss_fn: Callable[..., float], params: Sequence[np.ndarray],
                      eps: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar function, the gradient oracle."""
    params = [np.array(p, dtype=np.float64) for p in params]
    grads = []
    for i, p in enumerate(params):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn(*params)
            flat[j] = orig - eps
            dn = loss_fn(*params)
            flat[j] = orig
            gflat[j] = (up - dn) / (2.0 * eps)
        grads.append(g)
    return grads
