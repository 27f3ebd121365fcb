"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and, when gradients are required, a backward
closure plus links to its parent tensors. Calling backward() on a scalar
tensor walks the graph in reverse topological order and accumulates
gradients into every reachable tensor that requires them. Accumulation
order is fixed by graph construction order, so repeated backward passes
over the same graph are bitwise identical.
"""

from __future__ import annotations

import weakref
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_data(x, dtype=None):
    a = np.asarray(x, dtype=dtype)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    return a


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_grad_borrowed", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_data(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._grad_borrowed = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape},requires_grad={self.requires_grad})"

    # -- gradient bookkeeping -------------------------------------------

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)
        self._grad_borrowed = False

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        """Reverse pass from a scalar. Populates .grad on reachable tensors.

        Gradients of leaf tensors accumulate across calls (zero them
        between steps); gradients of interior nodes are reset per call.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
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
                if id(p) not in visited:
                    stack.append((p, False))
        for node in topo:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def permute(self, *axes):
        return permute(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _accumulate(t: Tensor, g: np.ndarray):
    # First contribution aliases the incoming array; a second contribution
    # copies before mutating so sibling tensors sharing the buffer (e.g. a
    # gradient passed through an add) are never corrupted.
    if t.grad is None:
        t.grad = g
        t._grad_borrowed = True
        return
    if t._grad_borrowed:
        t.grad = t.grad.copy()
        t._grad_borrowed = False
    t.grad += g


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic (numpy broadcasting) --------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out_data, (a, b), backward)


# -- linear algebra ----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _node(out_data, (a, b), backward)


# -- shape manipulation ----------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(out_data, (x,), backward)


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out_data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))

    return _node(out_data, (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [np.s_[:]] * g.ndim
                idx[axis] = np.s_[lo:hi]
                _accumulate(t, g[tuple(idx)])

    return _node(out_data, tuple(tensors), backward)


def slice_(x, index) -> Tensor:
    """Basic (view) indexing with int/slice/tuple indices."""
    x = as_tensor(x)
    out_data = x.data[index].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] += g
        _accumulate(x, gx)

    return _node(out_data, (x,), backward)


# -- reductions ----------------------------------------------------


def _expand_reduced(g, x_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(x_shape)), x_shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(x_shape) for a in axes)
    if not keepdims:
        shape = list(g.shape)
        for a in sorted(axes):
            shape.insert(a, 1)
        g = g.reshape(shape)
    return np.broadcast_to(g, x_shape)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        _accumulate(x, _expand_reduced(g, x.shape, axis, keepdims).astype(x.dtype, copy=False))

    return _node(out_data, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size / max(out_data.size, 1)

    def backward(g):
        _accumulate(x, (_expand_reduced(g, x.shape, axis, keepdims) / count).astype(x.dtype, copy=False))

    return _node(out_data, (x,), backward)


# -- nonlinearities ----------------------------------------------------


def leaky_relu(x, negative_slope=0.01) -> Tensor:
    x = as_tensor(x)
    out_data = np.where(x.data > 0, x.data, negative_slope * x.data)

    def backward(g):
        _accumulate(x, np.where(x.data > 0, g, negative_slope * g))

    return _node(out_data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out_data[~pos] = e / (1.0 + e)

    def backward(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _node(out_data, (x,), backward)


def softmax(x, axis=-1) -> Tensor:
    """Max-stabilized softmax along `axis`; rows sum to 1 for finite input."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(x, out_data * (g - dot))

    return _node(out_data, (x,), backward)


# -- normalization ----------------------------------------------------


def instance_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Per-(sample, channel) standardization over the spatial extent.

    x: [B, C, D, H, W]; gamma, beta: [C]. Variance is biased.
    """
    if eps <= 0:
        raise ValueError(f"instance_norm eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 5:
        raise ShapeError(f"instance_norm expects [B,C,D,H,W], got {x.shape}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("instance_norm affine parameters must have shape [C]")
    sp = (2, 3, 4)
    mu = x.data.mean(axis=sp, keepdims=True)
    var = x.data.var(axis=sp, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    gb = gamma.data.reshape(1, -1, 1, 1, 1)
    out_data = gb * xhat + beta.data.reshape(1, -1, 1, 1, 1)
    m = x.shape[2] * x.shape[3] * x.shape[4]

    def backward(g):
        gxhat = g * gb
        if x.requires_grad:
            t1 = gxhat.sum(axis=sp, keepdims=True)
            t2 = (gxhat * xhat).sum(axis=sp, keepdims=True)
            _accumulate(x, (inv_std / m) * (m * gxhat - t1 - xhat * t2))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3, 4)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3, 4)))

    return _node(out_data, (x, gamma, beta), backward)


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Standardization over the last axis. x: [..., C]; gamma, beta: [C]."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("layer_norm affine parameters must have shape [C]")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        gxhat = g * gamma.data
        if x.requires_grad:
            t1 = gxhat.sum(axis=-1, keepdims=True)
            t2 = (gxhat * xhat).sum(axis=-1, keepdims=True)
            _accumulate(x, (inv_std / c) * (c * gxhat - t1 - xhat * t2))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, c).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, c).sum(axis=0))

    return _node(out_data, (x, gamma, beta), backward)


# -- spatial ops ----------------------------------------------------


def _conv_out_dim(d, k, stride, pad):
    num = d + 2 * pad - k
    if num < 0 or num % stride != 0:
        raise ShapeError(
            f"conv3d output dim not integral: input {d}, kernel {k}, stride {stride}, pad {pad}"
        )
    return num // stride + 1


def conv3d(x, w, b=None, stride=1, pad=0) -> Tensor:
    """3D cross-correlation. x: [B,Cin,D,H,W], w: [Cout,Cin,k,k,k], b: [Cout].

    Computed as a shift-and-matmul over the k^3 kernel offsets, which keeps
    memory flat and routes the arithmetic through BLAS.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5D operands, got {x.shape} and {w.shape}")
    k = w.shape[2]
    if w.shape[3] != k or w.shape[4] != k:
        raise ShapeError(f"conv3d kernel must be cubic, got {w.shape[2:]}")
    if k % 2 == 0:
        raise ShapeError(f"conv3d kernel size must be odd, got {k}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv3d bias must have shape [Cout], got {b.shape}")
    if stride < 1:
        raise ShapeError(f"conv3d stride must be >= 1, got {stride}")
    bs, cin, d, h, wd = x.shape
    cout = w.shape[0]
    do = _conv_out_dim(d, k, stride, pad)
    ho = _conv_out_dim(h, k, stride, pad)
    wo = _conv_out_dim(wd, k, stride, pad)

    n_out = do * ho * wo
    kk = k * k * k

    if k == 1 and stride == 1 and pad == 0:
        # 1^3 kernels are a channel-mixing matmul; skip the im2col machinery
        w2 = w.data.reshape(cout, cin)
        xf = x.data.reshape(bs, cin, n_out)
        out_data = (w2 @ xf).reshape(bs, cout, d, h, wd)
        if b is not None:
            out_data = out_data + b.data.reshape(1, cout, 1, 1, 1)

        def backward_1x1(g):
            g2 = g.reshape(bs, cout, n_out)
            if w.requires_grad:
                _accumulate(w, (g2 @ np.swapaxes(xf, 1, 2)).sum(axis=0).reshape(w.shape))
            if x.requires_grad:
                _accumulate(x, (w2.T @ g2).reshape(x.shape))
            if b is not None and b.requires_grad:
                _accumulate(b, g.sum(axis=(0, 2, 3, 4)))

        parents = (x, w) if b is None else (x, w, b)
        return _node(out_data, parents, backward_1x1)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.data

    def im2col():
        # [B, Cin*k^3, N]; row order (c, i, j, l) matches w.reshape(Cout, -1)
        col = np.empty((bs, cin, kk, do, ho, wo), dtype=x.dtype)
        for idx, (i, j, l) in enumerate(_offsets(k)):
            col[:, :, idx] = xp[
                :, :, i : i + stride * do : stride, j : j + stride * ho : stride, l : l + stride * wo : stride
            ]
        return col.reshape(bs, cin * kk, n_out)

    w2 = w.data.reshape(cout, cin * kk)
    col = im2col()
    out_data = (w2 @ col).reshape(bs, cout, do, ho, wo)
    if b is not None:
        out_data = out_data + b.data.reshape(1, cout, 1, 1, 1)
    cache = _retain_col(col) if (_grad_enabled and w.requires_grad) else None
    del col

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(bs, cout, n_out))
        if w.requires_grad:
            saved = _consume_col(cache) if cache is not None else None
            gw = (g2 @ np.swapaxes(saved if saved is not None else im2col(), 1, 2)).sum(axis=0)
            del saved
            _accumulate(w, gw.reshape(w.shape))
        if x.requires_grad:
            gcol = (w2.T @ g2).reshape(bs, cin, kk, do, ho, wo)
            gxp = np.zeros((bs, cin, d + 2 * pad, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
            for idx, (i, j, l) in enumerate(_offsets(k)):
                gxp[
                    :, :, i : i + stride * do : stride, j : j + stride * ho : stride, l : l + stride * wo : stride
                ] += gcol[:, :, idx]
            if pad:
                gxp = gxp[:, :, pad:-pad, pad:-pad, pad:-pad]
            _accumulate(x, gxp)
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3, 4)))

    parents = (x, w) if b is None else (x, w, b)
    out = _node(out_data, parents, backward)
    if cache is not None:
        if out._backward is None:
            _consume_col(cache)  # graph not recorded; release immediately
        else:
            # release the budget if the graph is dropped without a backward pass
            weakref.finalize(out, _consume_col, cache)
    return out


def _offsets(k):
    return [(i, j, l) for i in range(k) for j in range(k) for l in range(k)]


# im2col buffers are cheap to rebuild but dominate backward time; retain them
# between forward and backward while total retained size stays in budget.
_COL_RETAIN_BUDGET = 512 * 1024 * 1024
_col_retained_bytes = 0


def _retain_col(col):
    global _col_retained_bytes
    if _col_retained_bytes + col.nbytes > _COL_RETAIN_BUDGET:
        return None
    _col_retained_bytes += col.nbytes
    return [col]


def _consume_col(cache):
    global _col_retained_bytes
    col = cache[0]
    if col is not None:
        cache[0] = None
        _col_retained_bytes -= col.nbytes
    return col


def upsample_nearest2x(x) -> Tensor:
    """Nearest-neighbor x2 upsampling of [B,C,D,H,W] along the spatial axes."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeError(f"upsample_nearest2x expects [B,C,D,H,W], got {x.shape}")
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
    bs, c, d, h, w = x.shape

    def backward(g):
        _accumulate(x, g.reshape(bs, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)))

    return _node(out_data, (x,), backward)
