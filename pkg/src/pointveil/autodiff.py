"""Minimal reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray and remembers how it was produced; calling
`backward()` on a scalar result walks the tape in reverse topological
order and accumulates gradients into every upstream `Tensor`. Plain
ndarrays and Python scalars passed to the ops are treated as constants
and receive no gradient, which keeps tapes small.

Subgradient conventions are fixed so gradients are reproducible:
ReLU uses 0 at the kink, and grouped max pooling routes the gradient to
the first (lowest-index) argmax row.

Gather/scatter pairs dominate message-passing workloads; `gather` takes
an optional precomputed CSR scatter matrix (see `scatter_matrix`) because
a sparse matmul is several times faster than `np.add.at` at our sizes.
"""

from __future__ import annotations

from typing import Sequence as SequenceType

import numpy as np
import scipy.sparse as sp


class Tensor:
    """Node in the differentiation tape."""

    __slots__ = ("data", "grad", "_parents", "_bwd", "_grad_owned")

    def __init__(self, data, _parents=(), _bwd=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self._parents = _parents
        self._bwd = _bwd
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g: np.ndarray) -> None:
        # First contribution is aliased; a second allocates once, after
        # which accumulation is in place.
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned and isinstance(self.grad, np.ndarray) and \
                self.grad.shape == np.shape(g):
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self) -> None:
        """Seed this node with a gradient of ones and backpropagate."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # Operator sugar for the handful of infix uses in model code.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _value(x):
    return x.data if isinstance(x, Tensor) else x


def _shape(x):
    return np.shape(_value(x))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binop(a, b, fwd, da, db):
    av, bv = _value(a), _value(b)
    out_data = fwd(av, bv)
    parents = tuple(x for x in (a, b) if isinstance(x, Tensor))
    if not parents:
        return out_data
    a_shape, b_shape = _shape(a), _shape(b)

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(_unbroadcast(da(g, av, bv), a_shape))
        if isinstance(b, Tensor):
            b.accumulate(_unbroadcast(db(g, av, bv), b_shape))

    return Tensor(out_data, parents, bwd)


def add(a, b):
    return _binop(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binop(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binop(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binop(
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def matmul(a, b):
    av, bv = _value(a), _value(b)
    out_data = av @ bv
    parents = tuple(x for x in (a, b) if isinstance(x, Tensor))
    if not parents:
        return out_data

    def bwd(g):
        if isinstance(a, Tensor):
            a.accumulate(g @ bv.T)
        if isinstance(b, Tensor):
            b.accumulate(av.T @ g)

    return Tensor(out_data, parents, bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, a.data.dtype.type(0))

    def bwd(g):
        a.accumulate(np.where(a.data > 0, g, g.dtype.type(0)))

    return Tensor(out_data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)

    def bwd(g):
        a.accumulate(g * e)

    return Tensor(e, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(g / a.data)

    return Tensor(np.log(a.data), (a,), bwd)


def log1p(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(g / (1.0 + a.data))

    return Tensor(np.log1p(a.data), (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(np.full(a.data.shape, g, dtype=a.data.dtype))

    return Tensor(np.asarray(a.data.sum()), (a,), bwd)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    return Tensor(out_data, (a,), bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.data.shape

    def bwd(g):
        a.accumulate(g.reshape(old))

    return Tensor(a.data.reshape(shape), (a,), bwd)


def concat(parts: SequenceType, axis: int = 1):
    datas = [_value(p) for p in parts]
    out_data = np.concatenate(datas, axis=axis)
    widths = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + widths)
    parents = tuple(p for p in parts if isinstance(p, Tensor))
    if not parents:
        return out_data

    def bwd(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(part, Tensor):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                part.accumulate(g[tuple(idx)])

    return Tensor(out_data, parents, bwd)


def slice_cols(a, lo: int, hi: int):
    """Contiguous column slice; backward pads the complement with zeros.

    Plain ndarrays (frozen constants) pass through without a tape node.
    """
    if not isinstance(a, Tensor):
        return a[:, lo:hi]
    out_data = a.data[:, lo:hi]

    def bwd(g):
        buf = np.zeros(a.data.shape, dtype=g.dtype)
        buf[:, lo:hi] = g
        a.accumulate(buf)

    return Tensor(out_data, (a,), bwd)


def slice_rows(a, lo: int, hi: int):
    """Contiguous row slice; constants pass through untaped."""
    if not isinstance(a, Tensor):
        return a[lo:hi]
    out_data = a.data[lo:hi]

    def bwd(g):
        buf = np.zeros(a.data.shape, dtype=g.dtype)
        buf[lo:hi] = g
        a.accumulate(buf)

    return Tensor(out_data, (a,), bwd)


def scatter_matrix(idx: np.ndarray, n_rows: int, dtype=np.float32) -> sp.csr_matrix:
    """CSR matrix S with S[idx[e], e] = 1, so S @ g scatter-adds g by idx."""
    n = len(idx)
    data = np.ones(n, dtype=dtype)
    return sp.csr_matrix((data, (idx, np.arange(n))), shape=(n_rows, n))


def gather(a: Tensor, idx: np.ndarray, scatter: sp.csr_matrix | None = None,
           uniform: int | None = None) -> Tensor:
    """Row gather a.data[idx]; backward scatter-adds into the source rows.

    Pass `uniform=u` when idx == repeat(arange(rows), u); the backward then
    reduces with a reshape-sum instead of sparse arithmetic.
    """
    out_data = a.data[idx]

    def bwd(g):
        if uniform is not None:
            red = g.reshape(a.data.shape[0], uniform, -1).sum(axis=1)
            a.accumulate(red.reshape(a.data.shape))
        elif scatter is not None:
            a.accumulate(scatter @ g)
        else:
            buf = np.zeros(a.data.shape, dtype=g.dtype)
            np.add.at(buf, idx, g)
            a.accumulate(buf)

    return Tensor(out_data, (a,), bwd)


def pick(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Elementwise selection a.data[rows, cols] -> 1-D tensor."""
    out_data = a.data[rows, cols]

    def bwd(g):
        buf = np.zeros(a.data.shape, dtype=g.dtype)
        np.add.at(buf, (rows, cols), g)
        a.accumulate(buf)

    return Tensor(out_data, (a,), bwd)


def segment_sum(a: Tensor, seg_ids: np.ndarray, n_segments: int,
                scatter: sp.csr_matrix | None = None,
                uniform: int | None = None) -> Tensor:
    """Sum rows of `a` into `n_segments` buckets given per-row segment ids.

    When every segment holds exactly `uniform` consecutive rows (rows sorted
    by segment), a reshape-sum avoids sparse arithmetic entirely.
    """
    if uniform is not None:
        out_data = a.data.reshape(n_segments, uniform, -1).sum(axis=1)
        if a.data.ndim == 1:
            out_data = out_data.reshape(n_segments)
    else:
        mat = scatter if scatter is not None else scatter_matrix(
            seg_ids, n_segments, dtype=a.data.dtype)
        if a.data.ndim == 1:
            out_data = mat @ a.data
        else:
            out_data = mat @ a.data

    def bwd(g):
        a.accumulate(g[seg_ids])

    return Tensor(out_data, (a,), bwd)


def group_max(a: Tensor, n_groups: int) -> Tensor:
    """Columnwise max over equal-sized contiguous row groups.

    Ties route the gradient to the lowest row index within the group.
    """
    rows = a.data.shape[0]
    if rows % n_groups != 0:
        raise ValueError(f"{rows} rows do not split into {n_groups} equal groups")
    m = rows // n_groups
    cube = a.data.reshape(n_groups, m, -1)
    arg = cube.argmax(axis=1)
    out_data = np.take_along_axis(cube, arg[:, None, :], axis=1)[:, 0, :]
    if a.data.ndim == 1:
        out_data = out_data.reshape(n_groups)

    def bwd(g):
        buf = np.zeros(cube.shape, dtype=g.dtype)
        gi, di = np.meshgrid(np.arange(n_groups), np.arange(cube.shape[2]), indexing="ij")
        np.add.at(buf, (gi, arg, di), g.reshape(n_groups, -1))
        a.accumulate(buf.reshape(a.data.shape))

    return Tensor(out_data, (a,), bwd)


def segment_softmax(logits: Tensor, seg_ids: np.ndarray, n_segments: int,
                    scatter: sp.csr_matrix | None = None,
                    uniform: int | None = None) -> Tensor:
    """Columnwise softmax within each row segment; accepts (E,) or (E, H).

    The per-segment max subtracted for numerical stability is treated as a
    constant, which leaves the softmax value and gradient unchanged.
    """
    vals = logits.data
    if uniform is not None:
        if vals.ndim == 1:
            seg_max = vals.reshape(n_segments, uniform).max(axis=1)
        else:
            seg_max = vals.reshape(n_segments, uniform, -1).max(axis=1)
    elif vals.ndim == 1:
        seg_max = np.full(n_segments, -np.inf, dtype=vals.dtype)
        np.maximum.at(seg_max, seg_ids, vals)
        seg_max = np.where(np.isfinite(seg_max), seg_max, vals.dtype.type(0))
    else:
        seg_max = np.full((n_segments, vals.shape[1]), -np.inf, dtype=vals.dtype)
        np.maximum.at(seg_max, seg_ids, vals)
        seg_max = np.where(np.isfinite(seg_max), seg_max, vals.dtype.type(0))
    shifted = sub(logits, seg_max[seg_ids])
    e = exp(shifted)
    denom = segment_sum(e, seg_ids, n_segments, scatter=scatter, uniform=uniform)
    return div(e, gather(denom, seg_ids, scatter=scatter, uniform=uniform))
