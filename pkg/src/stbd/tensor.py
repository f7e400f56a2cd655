"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

A ``Tensor`` wraps an ndarray. Every op that touches a tensor with
``requires_grad`` records its parents and a closure that maps the output
gradient to parent gradients. ``Tensor.backward`` walks that record in
reverse topological order, accumulating at fan-out points.
"""

import threading
from contextlib import contextmanager

import numpy as np

from . import _kernels as K
from .errors import DimensionError, NumericError, UsageError

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding",
    "concat",
    "dropout",
    "cross_entropy",
    "grad_check",
]

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data, parents, backward, op):
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- backward -------------------------------------------------------------

    def backward(self):
        """Populate ``.grad`` on every reachable leaf that requires grad."""
        if self.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
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
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), bw, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a tensor is not supported; multiply by its reciprocal")
        return self * (1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        src_shape, dtype = self.shape, self.dtype
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(i, (slice, int)) or i is None or i is Ellipsis for i in parts)

        def bw(g):
            out = np.zeros(src_shape, dtype=dtype)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(np.array(self.data[idx]), (self,), bw, "getitem")

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        src = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# differentiable functions


def matmul(a, b):
    """Matrix product with numpy batch broadcasting over leading axes."""
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), bw, "matmul")


def relu(x):
    mask = x.data > 0
    return Tensor._make(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def _rows(arr, axis):
    moved = np.moveaxis(arr, axis, -1)
    return np.ascontiguousarray(moved.reshape(-1, moved.shape[-1])), moved.shape


def _unrows(rows, moved_shape, axis):
    return np.moveaxis(rows.reshape(moved_shape), -1, axis)


def softmax(x, axis=-1):
    """Max-shifted softmax along ``axis``."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    rows, moved = _rows(x.data, axis)
    y_rows = K.softmax_rows(rows)
    y = _unrows(y_rows, moved, axis)

    def bw(g):
        g_rows, _ = _rows(g, axis)
        return (_unrows(K.softmax_rows_backward(y_rows, g_rows), moved, axis),)

    return Tensor._make(y, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    if not np.isfinite(x.data).all():
        raise NumericError("log_softmax input contains non-finite values")
    rows, moved = _rows(x.data, axis)
    out_rows = K.log_softmax_rows(rows)
    out = _unrows(out_rows, moved, axis)

    def bw(g):
        g_rows, _ = _rows(g, axis)
        p = np.exp(out_rows)
        return (_unrows(g_rows - p * g_rows.sum(axis=1, keepdims=True), moved, axis),)

    return Tensor._make(out, (x,), bw, "log_softmax")


def layer_norm(x, gain, bias):
    """Normalise the last axis to zero mean / unit variance, then scale and shift.

    The variance is floored at 1e-10 so constant vectors map to zero.
    """
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs a last axis of at least 2")
    rows = np.ascontiguousarray(x.data.reshape(-1, d))
    xhat, rstd, floored = K.layer_norm_rows(rows)
    gd, bd = gain.data, bias.data
    out = (xhat * gd + bd).reshape(x.shape)

    def bw(g):
        g_rows = g.reshape(-1, d)
        g_gain = (g_rows * xhat).sum(axis=0)
        g_bias = g_rows.sum(axis=0)
        g_xhat = np.ascontiguousarray(g_rows * gd)
        gx = K.layer_norm_rows_backward(g_xhat, xhat, rstd, floored)
        return gx.reshape(x.shape), g_gain, g_bias

    return Tensor._make(out, (x, gain, bias), bw, "layer_norm")


def embedding(table, ids):
    """Gather rows of ``table`` by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise UsageError(f"token id out of range for embedding of size {V}")
    tshape, dtype = table.shape, table.dtype

    def bw(g):
        flat = ids.reshape(-1)
        onehot = np.zeros((flat.size, V), dtype=dtype)
        onehot[np.arange(flat.size), flat] = 1.0
        return (onehot.T @ g.reshape(-1, tshape[1]),)

    return Tensor._make(table.data[ids], (table,), bw, "embedding")


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def dropout(x, p, rng, training):
    """Inverted dropout: scale kept units by 1/(1-p) at train time, identity otherwise."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise UsageError("dropout rate must be < 1")
    keep = (rng.random(x.shape, dtype=x.dtype) >= p) * x.dtype.type(1.0 / (1.0 - p))
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits, targets, mask=None, label_smoothing=0.0):
    """Mean token cross-entropy over positions where ``mask`` is true.

    ``logits`` has shape ``(..., V)``; ``targets`` and ``mask`` share the
    leading shape.
    """
    V = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise UsageError("cross_entropy over an empty (fully padded) target set")
    rows = np.ascontiguousarray(logits.data.reshape(-1, V))
    logp = K.log_softmax_rows(rows)
    flat_t = targets.reshape(-1)
    flat_m = mask.reshape(-1)
    nll = -logp[np.arange(len(flat_t)), flat_t]
    if label_smoothing > 0.0:
        nll = (1.0 - label_smoothing) * nll - label_smoothing * logp.mean(axis=1)
    loss = np.asarray((nll * flat_m).sum() / count, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        target_dist = np.zeros_like(p)
        target_dist[np.arange(len(flat_t)), flat_t] = 1.0 - label_smoothing
        if label_smoothing > 0.0:
            target_dist += label_smoothing / V
        grad = (p - target_dist) * (flat_m[:, None] * (g / count))
        return (grad.reshape(logits.shape).astype(logits.dtype),)

    return Tensor._make(loss, (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f, x, step=1e-6):
    """Compare autodiff against central differences for scalar ``f`` at ``x``.

    Returns the max over components of
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    ``x`` must be a float64 tensor; its data is perturbed in place and
    restored.
    """
    if not 1e-6 <= step <= 1e-3:
        raise UsageError(f"step must lie in [1e-6, 1e-3], got {step}")
    if x.dtype != np.float64:
        raise UsageError("grad_check requires double precision")
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    loss.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(x).data)
            flat[i] = orig - step
            fm = float(f(x).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite f near component {i}")
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0
