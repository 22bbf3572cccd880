"""Dense float64 tensors with an eager reverse-mode tape.

Every op in this module takes ``Tensor`` operands, computes its value with
numpy and records a closure mapping the output gradient to one gradient per
parent.  ``Tensor.backward`` replays those closures in reverse topological
order.
"""
from __future__ import annotations

import contextlib

import numpy as np
from scipy.linalg import lapack, solve_triangular

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "NotPositiveDefiniteError",
    "SingularMatrixError",
    "as_tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softplus",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "take",
    "linear",
    "softmax",
    "log_softmax",
    "conv2d",
    "maxpool2d",
    "cholesky",
    "tri_solve",
    "diag",
    "diag_embed",
    "tril",
    "index_rows",
    "sqdist",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (pivot {pivot} is not positive)")
        self.pivot = pivot


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A trainable leaf; ``grad`` always has the value's shape."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape (prediction passes)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data, parents, backward):
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g, shape):
    # scalar-with-tensor broadcasting only
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ----------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a constant that does not take part in differentiation."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _make(out, (a,), lambda g: (g * _sigmoid(x),))


# ------------------------------------------------------------------ structural
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def take(a, index: int, axis: int = -1) -> Tensor:
    """Select one slice along ``axis`` (e.g. the true-class column)."""
    a = as_tensor(a)
    out = np.take(a.data, index, axis=axis)

    def back(g):
        full = np.zeros_like(a.data)
        idx = [slice(None)] * a.data.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    return _make(out, (a,), back)


def index_rows(a, order) -> Tensor:
    """Gather rows of a 2-D (or 1-D) tensor in the given order."""
    a = as_tensor(a)
    order = np.asarray(order, dtype=np.intp)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, order, g)
        return (full,)

    return _make(a.data[order], (a,), back)


def linear(x, w, b=None) -> Tensor:
    """Dense layer ``x @ w.T + b`` with ``w`` stored as (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is None:
        return _make(out, (x, w), lambda g: (g @ w.data, g.T @ x.data))
    b = as_tensor(b)
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    return _make(out + b.data, (x, w, b), lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0)))


def sqdist(a, b) -> Tensor:
    """Pairwise squared Euclidean distances between the rows of ``a`` and ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"sqdist: row dimensions differ, {a.shape} vs {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def back(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return _make(out, (a, b), back)


def diag(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diag: expected a square matrix, got {a.shape}")
    return _make(np.diag(a.data).copy(), (a,), lambda g: (np.diag(g),))


def diag_embed(v) -> Tensor:
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise ShapeError(f"diag_embed: expected a vector, got {v.shape}")
    return _make(np.diag(v.data), (v,), lambda g: (np.diag(g).copy(),))


def tril(a, k: int = 0) -> Tensor:
    a = as_tensor(a)
    return _make(np.tril(a.data, k), (a,), lambda g: (np.tril(g, k),))


# ------------------------------------------------------------------- softmaxes
def softmax(a) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    a = as_tensor(a)
    if a.size == 0 or a.shape[-1] == 0:
        raise ShapeError("softmax: empty input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), back)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    if a.size == 0 or a.shape[-1] == 0:
        raise ShapeError("log_softmax: empty input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


# ------------------------------------------------------------ convolution/pool
def _im2col(x):
    n, c, h, w = x.shape
    ho, wo = h - 2, w - 2
    s = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, shape=(n, c, 3, 3, ho, wo), strides=(s[0], s[1], s[2], s[3], s[2], s[3])
    )
    # (n, ho, wo, c*9)
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * 9)


def conv2d(x, filters, bias=None) -> Tensor:
    """3x3 cross-correlation, stride 1, no padding.

    x: (N, C, H, W); filters: (F, C, 3, 3); bias: (F,) or None.
    """
    x, filters = as_tensor(x), as_tensor(filters)
    if x.data.ndim != 4 or filters.data.ndim != 4 or filters.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: expected NCHW input and Fx C x3x3 filters, got {x.shape}, {filters.shape}")
    n, c, h, w = x.shape
    f = filters.shape[0]
    if filters.shape[1] != c:
        raise ShapeError(f"conv2d: input has {c} channels but filters expect {filters.shape[1]}")
    if h < 3 or w < 3:
        raise ShapeError(f"conv2d: spatial size {h}x{w} smaller than the 3x3 kernel")
    ho, wo = h - 2, w - 2
    xd = np.ascontiguousarray(x.data)
    cols = _im2col(xd)
    wmat = filters.data.reshape(f, c * 9)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (gm.T @ cols).reshape(filters.shape)
        gcols = (gm @ wmat).reshape(n, ho, wo, c, 3, 3)
        gx = np.zeros((n, c, h, w))
        for i in range(3):
            for j in range(3):
                gx[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, filters) if bias is None else (x, filters, bias)
    return _make(np.ascontiguousarray(out), parents, back)


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/cols form partial windows."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    padded = np.full((n, c, ho * 2, wo * 2), -np.inf)
    padded[:, :, :h, :w] = x.data
    win = padded.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gp = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * 2, wo * 2)
        return (gp[:, :, :h, :w].copy(),)

    return _make(out, (x,), back)


# -------------------------------------------------------------- linear algebra
def _phi(a):
    out = np.tril(a)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(a) -> Tensor:
    """Lower Cholesky factor of the symmetric part of ``a``.

    The backward pass returns the symmetric sensitivity
    ``sym(L^-T Phi(L^T dL) L^-1)`` where Phi keeps the lower triangle and
    halves the diagonal.
    """
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"cholesky: expected a square matrix, got {a.shape}")
    sym = 0.5 * (a.data + a.data.T)
    factor, info = lapack.dpotrf(sym, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    L = factor

    def back(g):
        p = _phi(L.T @ np.tril(g))
        tmp = solve_triangular(L, p, trans="T", lower=True)
        s = solve_triangular(L, tmp.T, trans="T", lower=True).T
        return (0.5 * (s + s.T),)

    return _make(L, (a,), back)


def tri_solve(l, b, side: str = "lower") -> Tensor:
    """Solve ``l @ x = b`` (side="lower") or ``l.T @ x = b`` (side="upper").

    ``l`` is lower triangular in both cases; only its lower triangle is read.
    """
    l, b = as_tensor(l), as_tensor(b)
    if side not in ("lower", "upper"):
        raise ValueError(f"tri_solve: side must be 'lower' or 'upper', got {side!r}")
    if l.data.ndim != 2 or l.shape[0] != l.shape[1] or b.shape[0] != l.shape[0]:
        raise ShapeError(f"tri_solve: cannot solve {l.shape} against {b.shape}")
    d = np.diag(l.data)
    zero = np.flatnonzero(d == 0.0)
    if zero.size:
        raise SingularMatrixError(f"tri_solve: zero diagonal element at index {int(zero[0])}")
    vec = b.data.ndim == 1
    rhs = b.data[:, None] if vec else b.data
    trans = "N" if side == "lower" else "T"
    back_trans = "T" if side == "lower" else "N"
    x = solve_triangular(l.data, rhs, trans=trans, lower=True)

    def back(g):
        gm = g[:, None] if vec else g
        gb = solve_triangular(l.data, gm, trans=back_trans, lower=True)
        if side == "lower":
            gl = -np.tril(gb @ x.T)
        else:
            gl = -np.tril(x @ gb.T)
        return gl, (gb[:, 0] if vec else gb)

    return _make(x[:, 0] if vec else x, (l, b), back)
