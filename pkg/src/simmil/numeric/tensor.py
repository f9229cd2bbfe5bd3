"""Dense tensors with a reverse-mode differentiation tape.

Every op returns a new ``Tensor`` that remembers its parents and a closure
propagating the upstream gradient to them.  Nodes are never mutated after
construction, so the recorded graph is acyclic by construction.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError

DEFAULT_DTYPE = np.float32


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _backward=None):
        if dtype is None and not isinstance(data, (np.ndarray, np.generic, Tensor)):
            dtype = DEFAULT_DTYPE
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ------------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Populate ``.grad`` on every ``requires_grad`` leaf reachable from this node."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
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
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    # -- method forms of common ops ---------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _node(data, parents, backward) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, _parents=parents if rg else (), _backward=backward if rg else None)


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), backward)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _node(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _node(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


# -- reductions -------------------------------------------------------------
def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _node(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims),))


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)
    return _node(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims) / count,))


def tmax(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal element only."""
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx].reshape((1,) * a.ndim if keepdims else ())

        def backward(g):
            grad = np.zeros(flat.shape, dtype=a.dtype)
            grad[idx] = np.asarray(g).reshape(())
            return (grad.reshape(a.shape),)

        return _node(out.copy(), (a,), backward)
    ax = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, g, axis=ax)
        return (grad,)

    return _node(out if keepdims else np.squeeze(out, ax), (a,), backward)


# -- shape ------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(out, (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def take(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = a.data[index]

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _node(np.array(out, copy=True), (a,), backward)


def concat(tensors: list, axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), backward)


def stack(tensors: list, axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(out, tuple(tensors), backward)


def where(mask: np.ndarray, a: Tensor, b) -> Tensor:
    """Select ``a`` where ``mask`` holds and ``b`` (tensor or constant) elsewhere."""
    b = _lift(b, a)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        return (_unbroadcast(np.where(mask, g, 0), a.shape),
                _unbroadcast(np.where(mask, 0, g), b.shape))

    return _node(out, (a, b), backward)


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _lift(b, a)
    out = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return g @ np.swapaxes(bd, -1, -2), _unbroadcast(np.multiply.outer(ad, g), bd.shape)
        if bd.ndim == 1:
            return _unbroadcast(np.multiply.outer(g, bd), ad.shape), np.tensordot(g, ad, axes=(list(range(g.ndim)), list(range(g.ndim))))
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(out, (a, b), backward)


# -- normalisations ---------------------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Normalise over every axis except 1 (the feature/channel axis).

    In training mode the running estimates are updated in place.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        n = x.data.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * (n / max(n - 1, 1))
    else:
        mu = running_mean.reshape(bshape).astype(x.dtype)
        var = running_var.reshape(bshape).astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if training:
            m = x.data.size // x.shape[1]
            dx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), backward)


# -- convolution ------------------------------------------------------------
def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (B, C, Hp, Wp) -> (B, Ho, Wo, C*k*k)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    b, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho, wo, c * k * k)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D convolution (cross-correlation) on NCHW input with OIHW weights."""
    bsz, cin, h, wd = x.shape
    cout, cin_w, k, _ = w.shape
    if cin != cin_w:
        raise ContractError(f"conv2d expects {cin_w} input channels, got {cin}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1)  # B, Ho, Wo, Cout
        gw = np.tensordot(g2, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(bsz, ho, wo, cin, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, backward)


def take_along(a: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Gather with ``np.take_along_axis``; ``idx`` must be a permutation-like index."""
    out = np.take_along_axis(a.data, idx, axis=axis)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)

    return _node(out, (a,), backward)
