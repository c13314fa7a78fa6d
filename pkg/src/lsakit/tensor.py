"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when it was produced by an
operation on tensors that require gradients, remembers its parents and a
closure mapping the upstream gradient to one gradient per parent. Graphs are
only recorded when at least one input requires a gradient, so inference and
attack forwards on frozen parameters stay cheap.

``Tensor.backward`` *overwrites* the ``grad`` of every leaf it reaches, so
calling it twice on the same graph yields the same gradients.
"""

from __future__ import annotations

import numpy as np

from . import _kernels

DTYPE = np.float64


class AutodiffError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def backward(self) -> None:
        if not self.requires_grad or self._backward is None:
            raise AutodiffError("backward() called on a tensor that is not attached to a recorded computation")
        if self.data.size != 1:
            raise AutodiffError(f"backward() needs a scalar, got shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor, params=()) -> None:
    """Run reverse mode from ``loss`` after zeroing ``params``' gradients.

    Parameters the loss does not depend on end up with an all-zero gradient.
    """
    for p in params:
        p.grad = np.zeros_like(p.data)
    loss.backward()


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    neg = a.data <= 0
    e = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(neg, e, a.data)
    return _make(out, (a,), lambda g: (np.where(neg, g * (e + alpha), g),))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def row_norm(a: Tensor) -> Tensor:
    """Frobenius norm of each sample (axis 0 indexes samples).

    The gradient at an all-zero sample is taken as zero instead of 0/0.
    """
    flat = a.data.reshape(a.shape[0], -1)
    nrm = np.sqrt(np.einsum("ij,ij->i", flat, flat))

    def bw(g):
        safe = np.where(nrm > 0, nrm, 1.0)
        scale = np.where(nrm > 0, g / safe, 0.0)
        return ((flat * scale[:, None]).reshape(a.shape),)

    return _make(nrm, (a,), bw)


# ------------------------------------------------------------ layers


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape (N, in) and ``w`` of shape (out, in)."""
    out = x.data @ w.data.T + b.data

    def bw(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, w, b), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation. x: (N, C, H, W); w: (F, C, kh, kw)."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh, ow = h - kh + 1, wd - kw + 1
    cols = _kernels.im2col(x.data, kh, kw).reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T + b.data).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
            gx = _kernels.col2im(dcols, h, wd)
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(w.shape)
        if b.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gw, gb

    return _make(out, (x, w, b), bw)


def maxpool2d(x: Tensor, kh: int, kw: int) -> Tensor:
    h, wd = x.shape[2], x.shape[3]
    out, idx = _kernels.maxpool_forward(x.data, kh, kw)
    return _make(out, (x,), lambda g: (_kernels.maxpool_backward(np.ascontiguousarray(g), idx, h, wd, kh, kw),))


# ------------------------------------------------------------ losses


def binary_cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean logistic loss for logits of shape (N, 1) and 0/1 targets."""
    z = logits.data
    y = np.asarray(targets, dtype=DTYPE).reshape(z.shape)
    vals = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.shape[0]
    return _make(vals.sum() / n, (logits,), lambda g: (g * (_sigmoid(z) - y) / n,))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy for logits (N, C) and integer class ids."""
    z = logits.data
    y = np.asarray(targets).astype(np.int64).ravel()
    n = z.shape[0]
    logp = _log_softmax(z)
    loss = -logp[np.arange(n), y].sum() / n

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        return (g * p / n,)

    return _make(loss, (logits,), bw)


def softmax_kl(logits_p: Tensor, logits_q: Tensor) -> Tensor:
    """Batch-mean KL(softmax(p) || softmax(q)); gradients reach both sides."""
    lp, lq = _log_softmax(logits_p.data), _log_softmax(logits_q.data)
    p, q = np.exp(lp), np.exp(lq)
    n = lp.shape[0]
    kl_rows = (p * (lp - lq)).sum(axis=1)

    def bw(g):
        gp = gq = None
        if logits_p.requires_grad:
            gp = g * p * ((lp - lq) - kl_rows[:, None]) / n
        if logits_q.requires_grad:
            gq = g * (q - p) / n
        return gp, gq

    return _make(kl_rows.sum() / n, (logits_p, logits_q), bw)


def bernoulli_kl(logits_p: Tensor, logits_q: Tensor) -> Tensor:
    """Batch-mean KL(Bern(sigmoid(p)) || Bern(sigmoid(q))) for (N, 1) logits."""
    a, b = logits_p.data, logits_q.data
    sp, sq = _sigmoid(a), _sigmoid(b)
    # log sigmoid(z) = -softplus(-z); log(1 - sigmoid(z)) = -softplus(z)
    lsp, lsq = -_softplus(-a), -_softplus(-b)
    l1p, l1q = -_softplus(a), -_softplus(b)
    rows = sp * (lsp - lsq) + (1.0 - sp) * (l1p - l1q)
    n = a.shape[0]

    def bw(g):
        gp = gq = None
        if logits_p.requires_grad:
            # d/da: s(1-s) * [(lsp - lsq) - (l1p - l1q)]
            gp = g * sp * (1.0 - sp) * ((lsp - lsq) - (l1p - l1q)) / n
        if logits_q.requires_grad:
            gq = g * (sq - sp) / n
        return gp, gq

    return _make(rows.sum() / n, (logits_p, logits_q), bw)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
