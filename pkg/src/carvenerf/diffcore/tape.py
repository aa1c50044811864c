"""Array-valued reverse-mode automatic differentiation.

A :class:`Tape` is a Wengert list. Every primitive appends one entry holding
its parent indices and a closure mapping the output adjoint to parent
adjoints. Node values are numpy arrays so that one recorded op covers a
whole ray batch.

Gradients through ``maximum``/``minimum``/``min_select`` go to the selected
argument only; ties resolve to the lowest index.
"""
from __future__ import annotations

import numpy as np


class ContractError(ValueError):
    """Raised when an operation is used outside its documented contract."""


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Node:
    """Handle to one value on a tape."""

    __slots__ = ("tape", "value", "index", "needs_grad")
    __array_priority__ = 1000

    def __init__(self, tape, value, index, needs_grad):
        self.tape = tape
        self.value = value
        self.index = index
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)

    def __neg__(self):
        return self.tape.neg(self)

    def __pow__(self, exponent):
        return self.tape.power(self, exponent)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __getitem__(self, idx):
        return self.tape.getitem(self, idx)

    def sum(self, axis=None):
        return self.tape.sum(self, axis)

    def mean(self, axis=None):
        return self.tape.mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.reshape(self, shape)


class Tape:
    """Append-only record of primitive operations.

    With ``record=False`` values are computed but no history is kept; that is
    the evaluation-time rendering path.
    """

    def __init__(self, record=True, dtype=np.float64):
        self.record = record
        self.dtype = np.dtype(dtype)
        self._parents = []
        self._backward = []
        self._shapes = []
        self._leaves = {}
        self.adjoints = None

    def __len__(self):
        return len(self._parents)

    # ------------------------------------------------------------------ leaves
    def constant(self, value):
        return self._leaf(np.asarray(value, dtype=self.dtype), False)

    def variable(self, value, name=None):
        node = self._leaf(np.array(value, dtype=self.dtype), self.record)
        if name is not None and self.record:
            self._leaves[name] = node
        return node

    def leaves(self):
        """Named variables created on this tape."""
        return dict(self._leaves)

    def lift(self, x):
        return x if isinstance(x, Node) else self.constant(x)

    def _leaf(self, value, needs):
        if not self.record:
            return Node(self, value, -1, False)
        self._parents.append(())
        self._backward.append(None)
        self._shapes.append(value.shape)
        return Node(self, value, len(self._parents) - 1, needs)

    def _push(self, value, parents, backward):
        """Record ``value``; ``backward(g, need)`` returns parent adjoints."""
        needs = tuple(p.needs_grad for p in parents)
        if not self.record or not any(needs):
            return self._leaf(value, False) if self.record else Node(self, value, -1, False)
        self._parents.append(tuple(p.index for p in parents))
        self._backward.append(lambda g: backward(g, needs))
        self._shapes.append(value.shape)
        return Node(self, value, len(self._parents) - 1, True)

    # ---------------------------------------------------------------- backward
    def backward(self, output, seed=1.0):
        """Propagate adjoints from a scalar ``output`` to all of its ancestors.

        Returns the adjoint list; ``None`` entries are zero adjoints.
        """
        if output.tape is not self or output.index < 0:
            raise ContractError("output is not recorded on this tape")
        if output.value.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.value.shape}")
        adj = [None] * len(self._parents)
        adj[output.index] = np.full(output.value.shape, seed, dtype=self.dtype)
        for i in range(output.index, -1, -1):
            g = adj[i]
            back = self._backward[i]
            if g is None or back is None:
                continue
            for p, gp in zip(self._parents[i], back(g)):
                if gp is None:
                    continue
                if adj[p] is None:
                    adj[p] = gp if gp.shape == self._shapes[p] else np.broadcast_to(gp, self._shapes[p]).copy()
                else:
                    adj[p] = adj[p] + gp
        self.adjoints = adj
        return adj

    def grad(self, node):
        """Adjoint of ``node`` after :meth:`backward`; zeros for non-ancestors."""
        if self.adjoints is None:
            raise ContractError("backward() has not been run")
        g = self.adjoints[node.index] if 0 <= node.index < len(self.adjoints) else None
        return np.zeros(node.value.shape) if g is None else np.asarray(g)

    # ------------------------------------------------------------- elementwise
    def add(self, a, b):
        a, b = self.lift(a), self.lift(b)
        sa, sb = a.value.shape, b.value.shape
        return self._push(a.value + b.value, (a, b),
                          lambda g, n: (_unbroadcast(g, sa) if n[0] else None,
                                        _unbroadcast(g, sb) if n[1] else None))

    def sub(self, a, b):
        a, b = self.lift(a), self.lift(b)
        sa, sb = a.value.shape, b.value.shape
        return self._push(a.value - b.value, (a, b),
                          lambda g, n: (_unbroadcast(g, sa) if n[0] else None,
                                        _unbroadcast(-g, sb) if n[1] else None))

    def mul(self, a, b):
        a, b = self.lift(a), self.lift(b)
        av, bv = a.value, b.value
        return self._push(av * bv, (a, b),
                          lambda g, n: (_unbroadcast(g * bv, av.shape) if n[0] else None,
                                        _unbroadcast(g * av, bv.shape) if n[1] else None))

    def neg(self, a):
        return self._push(-a.value, (a,), lambda g, n: (-g,))

    def reciprocal(self, a):
        r = 1.0 / a.value
        return self._push(r, (a,), lambda g, n: (-g * r * r,))

    def div(self, a, b):
        b = self.lift(b)
        if not b.needs_grad:
            return self.mul(a, 1.0 / b.value)
        return self.mul(a, self.reciprocal(b))

    def exp(self, a):
        e = np.exp(a.value)
        return self._push(e, (a,), lambda g, n: (g * e,))

    def log(self, a):
        av = a.value
        return self._push(np.log(av), (a,), lambda g, n: (g / av,))

    def power(self, a, exponent):
        av = a.value
        p = float(exponent)
        if p == 2.0:
            return self._push(av * av, (a,), lambda g, n: (2.0 * g * av,))
        return self._push(av ** p, (a,), lambda g, n: (g * p * av ** (p - 1.0),))

    def sqrt(self, a):
        s = np.sqrt(a.value)
        return self._push(s, (a,), lambda g, n: (0.5 * g / s,))

    def sin(self, a):
        av = a.value
        return self._push(np.sin(av), (a,), lambda g, n: (g * np.cos(av),))

    def cos(self, a):
        av = a.value
        return self._push(np.cos(av), (a,), lambda g, n: (-g * np.sin(av),))

    def maximum(self, a, b):
        """Elementwise max; ties send the adjoint to ``a``."""
        return self._select(a, b, lambda x, y: x >= y)

    def minimum(self, a, b):
        """Elementwise min; ties send the adjoint to ``a``."""
        return self._select(a, b, lambda x, y: x <= y)

    def _select(self, a, b, prefer_a):
        a, b = self.lift(a), self.lift(b)
        pick = prefer_a(a.value, b.value)
        sa, sb = a.value.shape, b.value.shape
        return self._push(np.where(pick, a.value, b.value), (a, b),
                          lambda g, n: (_unbroadcast(g * pick, sa) if n[0] else None,
                                        _unbroadcast(g * ~pick, sb) if n[1] else None))

    def where(self, mask, a, b):
        """Select with a constant boolean mask."""
        a, b = self.lift(a), self.lift(b)
        mask = np.asarray(mask, dtype=bool)
        sa, sb = a.value.shape, b.value.shape
        return self._push(np.where(mask, a.value, b.value), (a, b),
                          lambda g, n: (_unbroadcast(g * mask, sa) if n[0] else None,
                                        _unbroadcast(g * ~mask, sb) if n[1] else None))

    def relu(self, a):
        out = np.maximum(a.value, 0.0)
        return self._push(out, (a,), lambda g, n: (g * (out > 0.0),))

    def softplus(self, a):
        av = a.value
        return self._push(np.logaddexp(0.0, av), (a,), lambda g, n: (g * _sigmoid(av),))

    def sigmoid(self, a):
        s = _sigmoid(a.value)
        return self._push(s, (a,), lambda g, n: (g * s * (1.0 - s),))

    # -------------------------------------------------------------- reductions
    def sum(self, a, axis=None):
        shape = a.value.shape

        def back(g, n):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return self._push(np.asarray(np.sum(a.value, axis=axis)), (a,), back)

    def mean(self, a, axis=None):
        count = a.value.size if axis is None else a.value.shape[axis]
        return self.mul(self.sum(a, axis), 1.0 / count)

    def min_select(self, a, axis=-1):
        """Minimum along ``axis``; the adjoint reaches the argmin entry only."""
        av = a.value
        arg = np.expand_dims(np.argmin(av, axis=axis), axis)
        out = np.take_along_axis(av, arg, axis=axis).squeeze(axis)

        def back(g, n):
            full = np.zeros(av.shape, dtype=g.dtype)
            np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
            return (full,)

        return self._push(out, (a,), back)

    def cumsum(self, a, axis=-1):
        return self._push(np.cumsum(a.value, axis=axis), (a,),
                          lambda g, n: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))

    # ---------------------------------------------------------- linear algebra
    def matmul(self, a, b):
        a, b = self.lift(a), self.lift(b)
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2:
            raise ContractError("matmul supports 2-D operands only")
        return self._push(av @ bv, (a, b),
                          lambda g, n: (g @ bv.T if n[0] else None, av.T @ g if n[1] else None))

    def affine(self, x, w, b):
        """``x @ w + b`` as one node (the dense-layer workhorse)."""
        x, w, b = self.lift(x), self.lift(w), self.lift(b)
        xv, wv = x.value, w.value
        out = xv @ wv
        out += b.value
        return self._push(out, (x, w, b),
                          lambda g, n: (g @ wv.T if n[0] else None,
                                        xv.T @ g if n[1] else None,
                                        g.sum(axis=0) if n[2] else None))

    # ---------------------------------------------------------------- structure
    def reshape(self, a, shape):
        old = a.value.shape
        return self._push(a.value.reshape(shape), (a,), lambda g, n: (g.reshape(old),))

    def getitem(self, a, idx):
        shape = a.value.shape
        basic = _is_basic_index(idx)

        def back(g, n):
            full = np.zeros(shape, dtype=g.dtype)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return self._push(np.asarray(a.value[idx]), (a,), back)

    def take(self, a, indices):
        """Gather rows (axis 0) with constant integer ``indices`` of any shape."""
        indices = np.asarray(indices)
        shape = a.value.shape

        def back(g, n):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, indices, g)
            return (full,)

        return self._push(a.value[indices], (a,), back)

    def take_along(self, a, indices, axis=-1):
        """``np.take_along_axis`` with constant ``indices``."""
        indices = np.asarray(indices)
        shape = a.value.shape

        def back(g, n):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, _along_index(indices, axis, len(shape)), g)
            return (full,)

        return self._push(np.take_along_axis(a.value, indices, axis=axis), (a,), back)

    def concat(self, nodes, axis=-1):
        nodes = [self.lift(x) for x in nodes]
        splits = np.cumsum([x.value.shape[axis] for x in nodes])[:-1]
        return self._push(np.concatenate([x.value for x in nodes], axis=axis), tuple(nodes),
                          lambda g, n: tuple(np.split(g, splits, axis=axis)))

    def stack(self, nodes, axis=-1):
        nodes = [self.lift(x) for x in nodes]
        out = np.stack([x.value for x in nodes], axis=axis)
        return self._push(out, tuple(nodes),
                          lambda g, n: tuple(np.take(g, i, axis=axis) for i in range(len(nodes))))


def _along_index(indices, axis, ndim):
    axis = axis % ndim
    grids = np.indices(indices.shape, sparse=True)
    return tuple(indices if d == axis else grids[d] for d in range(ndim))
