"""A small reverse-mode autodiff engine on numpy arrays.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` sorts
the graph topologically and walks it once in reverse, summing gradients at
fan-out points.
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import distcore
from .errors import ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        backward(self, grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def backward(loss: Tensor, grad=None):
    """Populate ``.grad`` on every tensor upstream of ``loss`` that requires it."""
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    order, seen, stack = [], set(), [(loss, False)]
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
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise and structural ops

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def tsum(x):
    return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x):
    n = x.data.size
    return _make(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


def reshape(x, shape):
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def stack(xs, axis=0):
    xs = list(xs)
    out = np.stack([x.data for x in xs], axis=axis)
    return _make(out, xs, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(xs))), "stack")


def concat(xs, axis=-1):
    xs = list(xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


# layers

def linear(x, w, b):
    """Affine map ``x @ w + b`` for ``x`` of shape [N, D] (or [D])."""
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape} do not agree")
    out = x.data @ w.data + b.data

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        x2 = x.data.reshape(-1, w.shape[0])
        return (g @ w.data.T, x2.T @ g2, g2.sum(axis=0))

    return _make(out, (x, w, b), back, "linear")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x, w, b, stride: int = 1, pad: int = 0):
    """Cross-correlation of x [N,C,H,W] with w [K,C,kh,kw] plus bias b [K].

    Output extent is ``floor((H + 2 pad - kh) / stride) + 1``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape} / bias {b.shape}")
    N, C, H, W = x.shape
    K, _, kh, kw = w.shape
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit padded input {x.shape} (pad={pad})")
    Ho, Wo = conv_output_size(H, kh, stride, pad), conv_output_size(W, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(K, -1)
    out = (cols @ wmat.T + b.data).reshape(N, Ho, Wo, K).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, K)
        dw = (g2.T @ cols).reshape(w.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ wmat).reshape(N, Ho, Wo, C, kh, kw)
        dxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp
        return dx, dw, db

    return _make(np.ascontiguousarray(out), (x, w, b), back, "conv2d")


def max_pool_region(x, r0: int, r1: int, c0: int, c1: int):
    """Per-channel max over rows [r0, r1) and cols [c0, c1) of the last two axes.

    Accepts [C,H,W] or [N,C,H,W]. On ties the first element in row-major
    order receives the gradient.
    """
    H, W = x.shape[-2:]
    if not (0 <= r0 < r1 <= H and 0 <= c0 < c1 <= W):
        raise ShapeError(f"max_pool_region: empty or out-of-range region rows [{r0},{r1}) cols [{c0},{c1}) on {x.shape}")
    patch = x.data[..., r0:r1, c0:c1]
    flat = patch.reshape(*patch.shape[:-2], -1)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    pw = c1 - c0

    def back(g):
        dx = np.zeros(x.shape, dtype=x.dtype)
        rows, cols = r0 + idx // pw, c0 + idx % pw
        lead = np.indices(idx.shape)
        dx[(*lead, rows, cols)] = g
        return (dx,)

    return _make(out, (x,), back, "max_pool_region")


def l2_normalize(x, eps: float = 1e-12):
    """Divide each vector along the last axis by ``max(||x||_2, eps)``."""
    norm = np.sqrt(np.sum(x.data.astype(np.float64) ** 2, axis=-1, keepdims=True)).astype(x.dtype)
    big = norm > eps
    n = np.where(big, norm, eps).astype(x.dtype)
    y = x.data / n

    def back(g):
        proj = np.sum(g * y, axis=-1, keepdims=True)
        return (np.where(big, (g - y * proj) / n, g / n),)

    return _make(y, (x,), back, "l2_normalize")


def _softmax_np(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    y = _softmax_np(x.data)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def cross_entropy_soft(logits, target):
    """Mean over rows of ``-sum target * log_softmax(logits)``."""
    t = np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"cross_entropy_soft: logits {logits.shape} vs target {t.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsm = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = 1 if logits.ndim == 1 else int(np.prod(logits.shape[:-1]))
    loss = -np.sum(t * logsm) / rows

    def back(g):
        return (g * (np.exp(logsm) - t) / rows,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), back, "cross_entropy_soft")


def huber(pred, target, delta: float):
    """Per-bin Huber loss summed over the last axis, averaged over rows."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"huber: prediction {pred.shape} vs target {t.shape}")
    val, grad = distcore.huber_elementwise(pred.data, t, delta)
    rows = 1 if pred.ndim == 1 else int(np.prod(pred.shape[:-1]))
    loss = val.sum() / rows
    grad = (grad / rows).astype(pred.dtype)
    return _make(np.asarray(loss, dtype=pred.dtype), (pred,), lambda g: (g * grad,), "huber")


def euclidean(pred, target):
    """``0.5 * sum (p - g)^2`` over the last axis, averaged over rows."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"euclidean: prediction {pred.shape} vs target {t.shape}")
    r = pred.data.astype(np.float64) - t
    rows = 1 if pred.ndim == 1 else int(np.prod(pred.shape[:-1]))
    loss = 0.5 * np.sum(r * r) / rows
    grad = (r / rows).astype(pred.dtype)
    return _make(np.asarray(loss, dtype=pred.dtype), (pred,), lambda g: (g * grad,), "euclidean")
