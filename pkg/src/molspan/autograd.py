"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine: each op records its parents and a closure that
accumulates gradients into them. Enough surface is implemented for the
transformer in this package (broadcast arithmetic, matmul, reductions,
reshaping, embedding lookups, row softmax, RMS norm, SiLU, gathers and a
ring-anchor similarity product). Heavy elementwise/reduction kernels route
through :mod:`molspan.kernels`.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels as K

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo numpy broadcasting by summing the gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        track = _grad_enabled and (requires_grad or any(p.requires_grad for p in parents))
        self.requires_grad = track
        self._parents = parents if track else ()
        self._backward = backward if track else None

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._lift(other)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_sum_to_shape(g, self.data.shape))
            if other.requires_grad:
                other._accum(_sum_to_shape(g, other.data.shape))

        return Tensor(out_data, parents=(self, other), backward=backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accum(-g)

        return Tensor(-self.data, parents=(self,), backward=backward)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_sum_to_shape(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_sum_to_shape(g * self.data, other.data.shape))

        return Tensor(out_data, parents=(self, other), backward=backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return self._lift(other) * self ** -1.0

    def __pow__(self, exponent: float):
        out_data = self.data ** exponent

        def backward(g):
            self._accum(g * exponent * self.data ** (exponent - 1.0))

        return Tensor(out_data, parents=(self,), backward=backward)

    def __matmul__(self, other):
        other = self._lift(other)
        out_data = self.data @ other.data

        def backward(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accum(_sum_to_shape(ga, self.data.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other._accum(_sum_to_shape(gb, other.data.shape))

        return Tensor(out_data, parents=(self, other), backward=backward)

    # -- shape ops --------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def backward(g):
            self._accum(g.reshape(old))

        return Tensor(self.data.reshape(shape), parents=(self,), backward=backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)

        def backward(g):
            self._accum(g.transpose(inv))

        return Tensor(self.data.transpose(axes), parents=(self,), backward=backward)

    def swapaxes(self, a, b):
        def backward(g):
            self._accum(np.swapaxes(g, a, b))

        return Tensor(np.swapaxes(self.data, a, b), parents=(self,), backward=backward)

    def __getitem__(self, key):
        out_data = self.data[key]

        def backward(g):
            full = np.zeros_like(self.data)
            full[key] = g
            self._accum(full)

        return Tensor(out_data, parents=(self,), backward=backward)

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape).copy())

        return Tensor(out_data, parents=(self,), backward=backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- elementwise ----------------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            self._accum(g * out_data)

        return Tensor(out_data, parents=(self,), backward=backward)

    def log(self):
        def backward(g):
            self._accum(g / self.data)

        return Tensor(np.log(self.data), parents=(self,), backward=backward)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g):
            self._accum(g * (1.0 - out_data * out_data))

        return Tensor(out_data, parents=(self,), backward=backward)

    def silu(self):
        out_data = K.silu_fwd(self.data)

        def backward(g):
            self._accum(K.silu_bwd(self.data, g))

        return Tensor(out_data, parents=(self,), backward=backward)


def tensor(data, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select with a constant condition array."""
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    a_d = a.data if a_t is not None else np.asarray(a)
    b_d = b.data if b_t is not None else np.asarray(b)
    out_data = np.where(cond, a_d, b_d)
    parents = tuple(t for t in (a_t, b_t) if t is not None)

    def backward(g):
        if a_t is not None and a_t.requires_grad:
            a_t._accum(_sum_to_shape(np.where(cond, g, 0.0), a_t.data.shape))
        if b_t is not None and b_t.requires_grad:
            b_t._accum(_sum_to_shape(np.where(cond, 0.0, g), b_t.data.shape))

    return Tensor(out_data, parents=parents, backward=backward)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return Tensor(out_data, parents=tuple(tensors), backward=backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """weight[ids]; gradient scatter-adds into the table."""
    out_data = weight.data[ids]

    def backward(g):
        if weight.grad is None:
            weight.grad = np.zeros_like(weight.data)
        K.scatter_add(weight.grad, ids.reshape(-1),
                      g.reshape(-1, weight.data.shape[1]))

    return Tensor(out_data, parents=(weight,), backward=backward)


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis: out[...] = x[..., idx[...]]."""
    expanded = np.expand_dims(idx, -1)
    out_data = np.take_along_axis(x.data, expanded, axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, expanded, np.expand_dims(g, -1), axis=-1)
        x._accum(full)

    return Tensor(out_data, parents=(x,), backward=backward)


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis; tolerates -inf entries."""
    shape = x.data.shape
    p_data = K.softmax_rows(x.data.reshape(-1, shape[-1])).reshape(shape)

    def backward(g):
        dx = K.softmax_rows_bwd(p_data.reshape(-1, shape[-1]),
                                g.reshape(-1, shape[-1]))
        x._accum(dx.reshape(shape))

    return Tensor(p_data, parents=(x,), backward=backward)


def log_softmax_last(x: Tensor) -> Tensor:
    """Stable log-softmax over the last axis (finite target slots only)."""
    m = np.max(x.data, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted_data = x.data - m
    e = np.exp(shifted_data)
    z = e.sum(axis=-1, keepdims=True)
    out_data = shifted_data - np.log(z)
    p = e / z

    def backward(g):
        x._accum(g - p * g.sum(axis=-1, keepdims=True))

    return Tensor(out_data, parents=(x,), backward=backward)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    shape = x.data.shape
    x2 = x.data.reshape(-1, shape[-1])
    y, r = K.rmsnorm_fwd(x2, gain.data, eps)

    def backward(g):
        dx, dg = K.rmsnorm_bwd(x2, gain.data, r, g.reshape(-1, shape[-1]))
        if x.requires_grad:
            x._accum(dx.reshape(shape))
        if gain.requires_grad:
            gain._accum(dg)

    return Tensor(y.reshape(shape), parents=(x, gain), backward=backward)


def anchor_similarity(h: Tensor, anchor_pos: np.ndarray) -> Tensor:
    """Dot products between each position and its open ring anchors.

    ``h`` is [B, L, D]; ``anchor_pos`` is [B, L, A] with -1 marking unused
    slots. Returns [B, L, A] of h_t . h_{a_i} / sqrt(D); entries at unused
    slots are computed against position 0 and must be masked by the caller
    (their gradient contribution is zeroed there via the mask).
    """
    b, l, d = h.data.shape
    a = anchor_pos.shape[-1]
    safe_pos = np.maximum(anchor_pos, 0)
    b_idx = np.arange(b)[:, None, None]
    ha = h.data[b_idx, safe_pos]                      # [B, L, A, D]
    scale = 1.0 / np.sqrt(d)
    out_data = np.einsum("bld,blad->bla", h.data, ha) * scale
    valid = anchor_pos >= 0

    def backward(g):
        g = np.where(valid, g, 0.0) * scale
        dh = np.einsum("bla,blad->bld", g, ha)
        flat = np.einsum("bla,bld->blad", g, h.data).reshape(-1, d)
        rows = (safe_pos + np.arange(b)[:, None, None] * l).reshape(-1)
        if h.grad is None:
            h.grad = np.zeros_like(h.data)
        h.grad += dh
        K.scatter_add(h.grad.reshape(-1, d), rows, flat)

    return Tensor(out_data, parents=(h,), backward=backward)
