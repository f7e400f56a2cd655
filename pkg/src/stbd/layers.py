"""Transformer building blocks on top of ``stbd.tensor``."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, dropout, layer_norm, matmul, relu, softmax

MASK_FILL = -1e9


class Module:
    """Tiny container: parameters are Tensor attributes, children are Module attributes."""

    training = True

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def xavier_uniform(rng, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def param(arr):
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32, bias=True):
        self.weight = param(xavier_uniform(rng, d_in, d_out, dtype))
        self.bias = param(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x):
        lead = x.shape[:-1]
        y = matmul(x.reshape(-1, x.shape[-1]), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(*lead, y.shape[-1])


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float32):
        self.gain = param(np.ones(d, dtype=dtype))
        self.bias = param(np.zeros(d, dtype=dtype))

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias)


@dataclass(frozen=True)
class AttentionConfig:
    d_m: int
    h: int

    def __post_init__(self):
        if self.d_m <= 0 or self.h <= 0:
            raise ConfigError("d_m and h must be positive")
        if self.d_m % self.h:
            raise ConfigError(f"d_m={self.d_m} is not divisible by h={self.h}")

    @property
    def d_head(self):
        return self.d_m // self.h

    d_q = d_k = d_v = d_head


def scaled_dot_attention(q, k, v, mask=None):
    """softmax(QK^T / sqrt(d_k)) V over the last two axes.

    ``mask`` is boolean, broadcastable to ``(..., t_q, t_k)``, true where
    attending is allowed. Disallowed scores are pushed to -1e9 before the
    softmax. Returns ``(output, weights)``.
    """
    d_k = q.shape[-1]
    if k.shape[-1] != d_k:
        raise DimensionError(f"query dim {d_k} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    scores = matmul(q, k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / np.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise DimensionError("attention mask leaves a query row with no allowed key")
        bias = np.where(mask, 0.0, MASK_FILL).astype(scores.dtype)
        scores = scores + Tensor(bias)
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


class MultiHeadAttention(Module):
    """Multi-head attention without projection biases.

    ``w_q[:, i*d_head:(i+1)*d_head]`` is head i's query projection (same for
    keys and values); ``w_o`` maps the concatenated heads back to d_m.
    """

    def __init__(self, cfg, rng, dtype=np.float32):
        self.cfg = cfg
        d = cfg.d_m
        self.w_q = param(xavier_uniform(rng, d, d, dtype))
        self.w_k = param(xavier_uniform(rng, d, d, dtype))
        self.w_v = param(xavier_uniform(rng, d, d, dtype))
        self.w_o = param(xavier_uniform(rng, d, d, dtype))

    def _split(self, x, w):
        b, t, _ = x.shape
        h, dh = self.cfg.h, self.cfg.d_head
        y = matmul(x.reshape(b * t, -1), w)
        return y.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

    def __call__(self, q, k, v, mask=None):
        """Inputs are ``(batch, t, d_m)``; mask broadcasts to ``(batch, 1, t_q, t_k)``.

        Returns ``(output, weights)`` with weights shaped ``(batch, h, t_q, t_k)``.
        """
        b, tq, d = q.shape
        qh = self._split(q, self.w_q)
        kh = self._split(k, self.w_k)
        vh = self._split(v, self.w_v)
        out, weights = scaled_dot_attention(qh, kh, vh, mask)
        out = out.transpose(0, 2, 1, 3).reshape(b * tq, d)
        return matmul(out, self.w_o).reshape(b, tq, d), weights


class FeedForward(Module):
    """max(0, x W1 + b1) W2 + b2, with dropout on the inner activation."""

    def __init__(self, d_m, d_f, rng, dropout_p=0.0, dtype=np.float32):
        if d_f <= 0:
            raise ConfigError("d_f must be positive")
        self.lin1 = Linear(d_m, d_f, rng, dtype)
        self.lin2 = Linear(d_f, d_m, rng, dtype)
        self.p = dropout_p
        self.rng = rng

    def __call__(self, x):
        inner = relu(self.lin1(x))
        inner = dropout(inner, self.p, self.rng, self.training)
        return self.lin2(inner)


def sinusoidal_positions(max_len, d_m):
    if d_m % 2:
        raise ConfigError(f"sinusoidal positions need an even width, got {d_m}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    rate = 1.0 / np.power(10000.0, np.arange(0, d_m, 2, dtype=np.float64) / d_m)
    pe = np.zeros((max_len, d_m))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate)
    return Tensor(pe)


def causal_mask(t):
    """Lower-triangular (diagonal included) boolean mask."""
    return np.tril(np.ones((t, t), dtype=bool))


def padding_mask(lengths, t):
    """``(batch, t)`` boolean, true at valid positions."""
    return np.arange(t)[None, :] < np.asarray(lengths)[:, None]
