"""Minimal reverse-mode automatic differentiation over numpy arrays.

Everything is float64. A Tensor wraps an ndarray plus an optional
gradient; operations build a graph of backward closures which
``backward()`` replays in reverse topological order. Only the ops the
network needs are implemented; all of them support the broadcasting
that numpy itself performs, with gradients summed back to the original
shapes.

The engine is deliberately free of global state so repeated runs with
identical inputs are bit-reproducible.
"""

from __future__ import annotations

import numpy as np


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(np.float64, copy=False)
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
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
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor (seed defaults to ones)."""
        if grad is None:
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=np.float64)

        # iterative topological sort; graphs get deep enough that
        # recursion would hit the interpreter limit
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- binary ops -------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = _make(self.data + other.data, (self, other))
        if out.requires_grad:
            def bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g, b.data.shape))
            out._backward = bwd
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = _make(self.data - other.data, (self, other))
        if out.requires_grad:
            def bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g, b.data.shape))
            out._backward = bwd
        return out

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = _make(self.data * other.data, (self, other))
        if out.requires_grad:
            def bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g * a.data, b.data.shape))
            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = _make(self.data / other.data, (self, other))
        if out.requires_grad:
            def bwd(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data),
                                               b.data.shape))
            out._backward = bwd
        return out

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __neg__(self):
        out = _make(-self.data, (self,))
        if out.requires_grad:
            def bwd(g, a=self):
                a._accumulate(-g)
            out._backward = bwd
        return out

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = _make(np.matmul(self.data, other.data), (self, other))
        if out.requires_grad:
            def bwd(g, a=self, b=other):
                if a.requires_grad:
                    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                    a._accumulate(_unbroadcast(ga, a.data.shape))
                if b.requires_grad:
                    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                    b._accumulate(_unbroadcast(gb, b.data.shape))
            out._backward = bwd
        return out

    # -- unary ops --------------------------------------------------

    def relu(self):
        out = _make(np.maximum(self.data, 0.0), (self,))
        if out.requires_grad:
            mask = self.data > 0.0
            def bwd(g, a=self, m=mask):
                a._accumulate(g * m)
            out._backward = bwd
        return out

    def exp(self):
        out = _make(np.exp(self.data), (self,))
        if out.requires_grad:
            def bwd(g, a=self, y=out.data):
                a._accumulate(g * y)
            out._backward = bwd
        return out

    def log(self):
        out = _make(np.log(self.data), (self,))
        if out.requires_grad:
            def bwd(g, a=self):
                a._accumulate(g / a.data)
            out._backward = bwd
        return out

    def sqrt(self):
        """Square root whose gradient at exactly 0 is taken as 0.

        The zero convention keeps batch-hard losses finite when two
        embeddings in a batch coincide.
        """
        out = _make(np.sqrt(self.data), (self,))
        if out.requires_grad:
            def bwd(g, a=self, y=out.data):
                safe = np.where(y > 0.0, y, 1.0)
                a._accumulate(np.where(y > 0.0, g / (2.0 * safe), 0.0))
            out._backward = bwd
        return out

    def square(self):
        out = _make(self.data * self.data, (self,))
        if out.requires_grad:
            def bwd(g, a=self):
                a._accumulate(g * 2.0 * a.data)
            out._backward = bwd
        return out

    # -- reductions -------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            def bwd(g, a=self, axis=axis, keepdims=keepdims):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            out._backward = bwd
        return out

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else _axis_count(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis, keepdims=False):
        """Max along one axis; gradient routes to the first argmax."""
        data = self.data
        out_data = data.max(axis=axis, keepdims=keepdims)
        out = _make(out_data, (self,))
        if out.requires_grad:
            idx = data.argmax(axis=axis)
            def bwd(g, a=self, axis=axis, keepdims=keepdims, idx=idx):
                if not keepdims:
                    g_exp = np.expand_dims(g, axis)
                else:
                    g_exp = g
                grad = np.zeros_like(a.data)
                np.put_along_axis(grad, np.expand_dims(idx, axis), g_exp, axis)
                a._accumulate(grad)
            out._backward = bwd
        return out

    # -- shape ops --------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,))
        if out.requires_grad:
            def bwd(g, a=self):
                a._accumulate(g.reshape(a.data.shape))
            out._backward = bwd
        return out

    def transpose(self, axes):
        out = _make(self.data.transpose(axes), (self,))
        if out.requires_grad:
            inv = np.argsort(axes)
            def bwd(g, a=self, inv=tuple(inv)):
                a._accumulate(g.transpose(inv))
            out._backward = bwd
        return out

    def __getitem__(self, key):
        out = _make(self.data[key], (self,))
        if out.requires_grad:
            def bwd(g, a=self, key=key):
                grad = np.zeros_like(a.data)
                grad[key] = g
                a._accumulate(grad)
            out._backward = bwd
        return out

    def take(self, indices, axis):
        """Gather along an axis; repeated indices scatter-add on the
        way back."""
        indices = np.asarray(indices)
        out = _make(np.take(self.data, indices, axis=axis), (self,))
        if out.requires_grad:
            def bwd(g, a=self, indices=indices, axis=axis):
                grad = np.zeros_like(a.data)
                gm = np.moveaxis(grad, axis, 0)
                np.add.at(gm, indices, np.moveaxis(g, axis, 0))
                a._accumulate(grad)
            out._backward = bwd
        return out

    def pad_axis(self, axis, before, after):
        """Zero-pad along one axis."""
        widths = [(0, 0)] * self.data.ndim
        widths[axis] = (before, after)
        out = _make(np.pad(self.data, widths), (self,))
        if out.requires_grad:
            def bwd(g, a=self, axis=axis, before=before):
                sl = [slice(None)] * a.data.ndim
                sl[axis] = slice(before, before + a.data.shape[axis])
                a._accumulate(g[tuple(sl)])
            out._backward = bwd
        return out


def _make(data: np.ndarray, parents) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
    return out


def _axis_count(shape, axis):
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def concat(tensors, axis=0) -> Tensor:
    datas = [t.data for t in tensors]
    out = _make(np.concatenate(datas, axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [d.shape[axis] for d in datas]
        def bwd(g, tensors=tuple(tensors), sizes=sizes, axis=axis):
            start = 0
            for t, size in zip(tensors, sizes):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(start, start + size)
                    t._accumulate(g[tuple(sl)])
                start += size
        out._backward = bwd
    return out


def softmax(x: Tensor, axis=-1, mask=None) -> Tensor:
    """Numerically-stable softmax; optional binary mask excludes
    entries from the normalization (their output is 0)."""
    data = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        shifted = np.where(mask, data, -np.inf)
        m = shifted.max(axis=axis, keepdims=True)
        # rows that are fully masked would produce nan; keep them at 0
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.exp(np.where(mask, data - m, -np.inf))
    else:
        m = data.max(axis=axis, keepdims=True)
        e = np.exp(data - m)
    denom = e.sum(axis=axis, keepdims=True)
    denom = np.where(denom == 0.0, 1.0, denom)
    y = e / denom
    out = _make(y, (x,))
    if out.requires_grad:
        def bwd(g, a=x, y=y, axis=axis):
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - dot))
        out._backward = bwd
    return out


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)
