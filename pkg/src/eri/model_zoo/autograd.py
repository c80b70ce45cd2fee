"""A small reverse-mode autodiff engine over numpy arrays.

Each ``Var`` keeps its parents and a closure that maps the output gradient to
parent gradients. ``backward`` walks the graph in reverse topological order.
Only the operations the model stack needs are implemented.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

# activation patterns of piecewise-linear ops, collected only inside record_kinks()
_kink_log: list | None = None


@contextmanager
def record_kinks():
    """Collect ReLU masks and max-pool selections of forward passes run inside the block.

    Two forward passes with equal logs lie on the same linear piece, which is
    what a finite-difference stencil needs to be valid.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    __slots__ = ("data", "grad", "parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, parents=(), backward=None, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.name = name

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Var{label}(shape={self.shape}, dtype={self.data.dtype})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order, seen = [], set()
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
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_var(other)))

    def __rsub__(self, other):
        return add(as_var(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis, keepdims)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return Var(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Var) -> Var:
    return Var(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return Var(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)),
    )


def power(a: Var, p: float) -> Var:
    out = a.data**p
    return Var(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def matmul(a, b) -> Var:
    """Batched matmul with numpy broadcasting over leading axes."""
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return Var(a.data @ b.data, (a, b), backward)


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return Var(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Var, axes) -> Var:
    inv = np.argsort(axes)
    return Var(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Var, idx) -> Var:
    shape, dtype = a.shape, a.data.dtype
    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis for i in items)

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Var(a.data[idx], (a,), backward)


def vsum(a: Var, axis=None, keepdims=False) -> Var:
    shape = a.shape
    if axis is not None:
        axis = tuple(int(i) % a.ndim for i in np.atleast_1d(axis))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Var(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def vmean(a: Var, axis=None, keepdims=False) -> Var:
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[i] for i in axes]))
    return vsum(a, axis, keepdims) * (1.0 / count)


def stack(vs, axis=0) -> Var:
    datas = [v.data for v in vs]
    n = len(vs)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Var(np.stack(datas, axis=axis), tuple(vs), backward)


def concat(vs, axis=-1) -> Var:
    sizes = np.cumsum([v.shape[axis] for v in vs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Var(np.concatenate([v.data for v in vs], axis=axis), tuple(vs), backward)


def pad(a: Var, widths) -> Var:
    """Zero padding; ``widths`` follows ``np.pad``."""
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return Var(np.pad(a.data, widths), (a,), lambda g: (g[slices],))


# elementwise nonlinearities ------------------------------------------------


def relu(a: Var) -> Var:
    mask = a.data > 0
    if _kink_log is not None:
        _kink_log.append(np.packbits(mask).tobytes())
    return Var(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Var) -> Var:
    x = a.data
    # split by sign so exp never overflows
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex)).astype(x.dtype)
    return Var(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Var) -> Var:
    out = np.tanh(a.data)
    return Var(out, (a,), lambda g: (g * (1 - out * out),))


def exp(a: Var) -> Var:
    out = np.exp(a.data)
    return Var(out, (a,), lambda g: (g * out,))


def softmax(a: Var, axis=-1) -> Var:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Var(out, (a,), backward)


# convolution and pooling ---------------------------------------------------


def conv2d(x: Var, w: Var, b: Var | None = None) -> Var:
    """Stride-1 'same' convolution, NHWC input and [kh, kw, cin, cout] kernel."""
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ValueError(f"kernel expects {wcin} input channels, got {cin}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
    cols = np.concatenate(
        [xp[:, i : i + h, j : j + wd, :] for i in range(kh) for j in range(kw)], axis=-1
    ).reshape(-1, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, h, wd, cout)
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wmat.T).reshape(n, h, wd, kh * kw, cin)
        gxp = np.zeros_like(xp)
        k = 0
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + h, j : j + wd, :] += gcols[:, :, :, k, :]
                k += 1
        gx = gxp[:, ph : ph + h, pw : pw + wd, :]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Var(out, parents, backward)


def maxpool2x2(x: Var) -> Var:
    """2x2 max pooling, stride 2, trailing odd rows/columns dropped."""
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    xc = x.data[:, : h2 * 2, : w2 * 2, :]
    blocks = xc.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    arg = blocks.argmax(axis=-1)
    if _kink_log is not None:
        _kink_log.append(arg.astype(np.uint8).tobytes())
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h2 * 2, w2 * 2, c)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, : h2 * 2, : w2 * 2, :] = gb
        return (gx,)

    return Var(out, (x,), backward)
