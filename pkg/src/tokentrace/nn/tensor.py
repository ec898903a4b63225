"""Tape-based reverse-mode autograd over numpy arrays.

Tensors wrap float32 arrays during training; building parameters in
float64 gives a verification mode where analytic gradients can be checked
against central finite differences tightly. Gradients accumulate into
``.grad`` buffers and only flow to tensors with ``requires_grad`` set, so
frozen parameters never allocate gradient storage.
"""

from __future__ import annotations

import numpy as np

from ..errors import StateError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to shape, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise StateError("backward requires a scalar loss")
        if not self.requires_grad:
            raise StateError(
                "backward on a graph with no trainable inputs; run a forward "
                "pass over parameters that require gradients first"
            )
        if self._consumed:
            raise StateError("backward already ran on this graph")
        self._consumed = True
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        # Free each interior node as soon as its gradient has been pushed
        # to its parents: caps peak memory at a frontier of the graph and
        # breaks the closure reference cycles without waiting on the GC.
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn()
                node._backward_fn = None
                node._parents = ()
                node.grad = None

    # --- arithmetic ---

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, -other)
        s = _weak_scalar(other)
        if s is not None:
            return add(self, -s)
        return add(self, Tensor(-np.asarray(other)))

    def __rsub__(self, other):
        return add(-self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, int):
            n = self.data.shape[axis]
        else:
            n = int(np.prod([self.data.shape[a] for a in axis]))
        return tensor_sum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _weak_scalar(x):
    """Python number for scalar operands, else None.

    Python scalars promote weakly in numpy 2, so routing them around
    Tensor wrapping keeps float32 graphs in float32; a wrapped 0-d
    float64 array would upcast everything downstream.
    """
    if isinstance(x, bool):
        return None
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x)
    return None


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
    return out


def _accum(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    grad = _unbroadcast(grad, t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def add(a, b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        s = _weak_scalar(b)
        if s is not None:
            out = _node(a.data + s, (a,))
            if out.requires_grad:

                def _bw():
                    _accum(a, out.grad)

                out._backward_fn = _bw
            return out
    elif isinstance(b, Tensor) and _weak_scalar(a) is not None:
        return add(b, a)
    a, b = _ensure(a), _ensure(b)
    out = _node(a.data + b.data, (a, b))
    if out.requires_grad:

        def _bw():
            _accum(a, out.grad)
            _accum(b, out.grad)

        out._backward_fn = _bw
    return out


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        s = _weak_scalar(b)
        if s is not None:
            out = _node(a.data * s, (a,))
            if out.requires_grad:

                def _bw():
                    _accum(a, out.grad * s)

                out._backward_fn = _bw
            return out
    elif isinstance(b, Tensor) and _weak_scalar(a) is not None:
        return mul(b, a)
    a, b = _ensure(a), _ensure(b)
    out = _node(a.data * b.data, (a, b))
    if out.requires_grad:

        def _bw():
            _accum(a, out.grad * b.data)
            _accum(b, out.grad * a.data)

        out._backward_fn = _bw
    return out


def matmul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = _node(np.matmul(a.data, b.data), (a, b))
    if out.requires_grad:

        def _bw():
            _accum(a, np.matmul(out.grad, b.data.swapaxes(-1, -2)))
            _accum(b, np.matmul(a.data.swapaxes(-1, -2), out.grad))

        out._backward_fn = _bw
    return out


def power(a, p: float) -> Tensor:
    a = _ensure(a)
    out = _node(a.data**p, (a,))
    if out.requires_grad:

        def _bw():
            _accum(a, out.grad * p * a.data ** (p - 1))

        out._backward_fn = _bw
    return out


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:

        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))

        out._backward_fn = _bw
    return out


def reshape(a, shape) -> Tensor:
    a = _ensure(a)
    out = _node(a.data.reshape(shape), (a,))
    if out.requires_grad:

        def _bw():
            _accum(a, out.grad.reshape(a.data.shape))

        out._backward_fn = _bw
    return out


def transpose(a, axes) -> Tensor:
    a = _ensure(a)
    out = _node(a.data.transpose(axes), (a,))
    if out.requires_grad:
        inverse = np.argsort(axes)

        def _bw():
            _accum(a, out.grad.transpose(inverse))

        out._backward_fn = _bw
    return out


def exp(a) -> Tensor:
    a = _ensure(a)
    out = _node(np.exp(a.data), (a,))
    if out.requires_grad:

        def _bw():
            _accum(a, out.grad * out.data)

        out._backward_fn = _bw
    return out


def log(a) -> Tensor:
    a = _ensure(a)
    out = _node(np.log(a.data), (a,))
    if out.requires_grad:

        def _bw():
            _accum(a, out.grad / a.data)

        out._backward_fn = _bw
    return out


def tanh(a) -> Tensor:
    a = _ensure(a)
    out = _node(np.tanh(a.data), (a,))
    if out.requires_grad:

        def _bw():
            _accum(a, out.grad * (1.0 - out.data**2))

        out._backward_fn = _bw
    return out


def sigmoid(a) -> Tensor:
    a = _ensure(a)
    x = a.data
    with np.errstate(over="ignore"):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    out = _node(s, (a,))
    if out.requires_grad:

        def _bw():
            _accum(a, out.grad * out.data * (1.0 - out.data))

        out._backward_fn = _bw
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(x)), overflow-safe; gradient is sigmoid(x)."""
    a = _ensure(a)
    out = _node(np.logaddexp(0.0, a.data), (a,))
    if out.requires_grad:

        def _bw():
            x = a.data
            with np.errstate(over="ignore"):
                s = np.where(
                    x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x))
                )
            _accum(a, out.grad * s)

        out._backward_fn = _bw
    return out


def mask_keep(a, keep: np.ndarray, fill_value: float) -> Tensor:
    """Keep entries where the boolean mask is true, fill the rest.

    The fill value is a constant, so no gradient flows through masked
    entries; with fill -inf this gives exact causal masking under softmax.
    """
    a = _ensure(a)
    keep = np.asarray(keep, dtype=bool)
    out = _node(np.where(keep, a.data, a.data.dtype.type(fill_value)), (a,))
    if out.requires_grad:

        def _bw():
            _accum(a, out.grad * keep)

        out._backward_fn = _bw
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = _ensure(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _node(y, (a,))
    if out.requires_grad:

        def _bw():
            inner = (out.grad * y).sum(axis=axis, keepdims=True)
            _accum(a, y * (out.grad - inner))

        out._backward_fn = _bw
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _ensure(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = _node(y, (a,))
    if out.requires_grad:

        def _bw():
            inner = out.grad.sum(axis=axis, keepdims=True)
            _accum(a, out.grad - np.exp(y) * inner)

        out._backward_fn = _bw
    return out


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    table = _ensure(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"ids outside [0, {table.data.shape[0]}) in embedding lookup"
        )
    out = _node(table.data[ids], (table,))
    if out.requires_grad:

        def _bw():
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            _accum(table, g)

        out._backward_fn = _bw
    return out


def gather_rows(a, index: np.ndarray) -> Tensor:
    """out[i] = a[i, index[i]] for a 2-d tensor."""
    a = _ensure(a)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = _node(a.data[rows, index], (a,))
    if out.requires_grad:

        def _bw():
            g = np.zeros_like(a.data)
            np.add.at(g, (rows, index), out.grad)
            _accum(a, g)

        out._backward_fn = _bw
    return out


def concat_last(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = _node(np.concatenate([a.data, b.data], axis=-1), (a, b))
    if out.requires_grad:
        na = a.data.shape[-1]

        def _bw():
            _accum(a, out.grad[..., :na])
            _accum(b, out.grad[..., na:])

        out._backward_fn = _bw
    return out


def parameter(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=requires_grad)
