"""Reusable neural layers: linear, layer norm, multi-head attention with
pluggable masks, pre-norm transformer blocks, stochastic depth."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ContractError, ShapeError

MASK_BIAS = -1e9  # additive pre-softmax constant; drives weights to exact zero


def param(rng: np.random.Generator, shape, scale: float = 0.02) -> Tensor:
    """A trainable tensor, normal(0, scale) init (zeros when scale == 0)."""
    if scale == 0.0:
        data = np.zeros(shape)
    else:
        data = rng.normal(0.0, scale, shape)
    t = Tensor(data, requires_grad=True)
    t.is_param = True
    return t


def linear_param(rng: np.random.Generator, d_in: int, d_out: int) -> Tensor:
    """Fan-in-scaled weight init; keeps activations O(1) at tiny widths."""
    return param(rng, (d_in, d_out), scale=d_in**-0.5)


class Module:
    """Parameter container with recursive named traversal.

    Attributes that are parameter tensors, Modules, or lists of Modules
    are discovered in definition order; names join with dots.
    """

    training = False

    def named_parameters(self):
        out = {}
        self._collect("", out)
        return out

    def _collect(self, prefix, out):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.is_param:
                out[key] = value
            elif isinstance(value, Module):
                value._collect(key + ".", out)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item._collect(f"{key}.{i}.", out)

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, zero_init: bool = False,
                 scale: float | None = None):
        if zero_init:
            self.weight = param(rng, (d_in, d_out), 0.0)
        elif scale is not None:
            self.weight = param(rng, (d_in, d_out), scale)
        else:
            self.weight = linear_param(rng, d_in, d_out)
        self.bias = param(rng, (d_out,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(
                f"linear: input width {x.shape} vs weight {self.weight.shape}"
            )
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = param(None, (d,), 0.0)
        self.gamma.data[:] = 1.0
        self.beta = param(None, (d,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.layer_norm(x) * self.gamma + self.beta


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm."""
    sq = (x * x).sum(axis=-1, keepdims=True)
    return x * dc.pow_scalar(sq + eps, -0.5)


@dataclass
class AttentionMask:
    """Attention pattern: which key positions each query may see.

    ``matrix`` is an {0,1} allowed-matrix; rows are queries. The causal
    form is lower-triangular including the diagonal.
    """

    kind: str
    matrix: np.ndarray | None = None

    @classmethod
    def bidirectional(cls):
        return cls("bidirectional", None)

    @classmethod
    def causal(cls, length: int):
        return cls("causal", np.tril(np.ones((length, length))))

    @classmethod
    def custom(cls, matrix: np.ndarray):
        return cls("custom", np.asarray(matrix, dtype=float))

    def allowed(self, n_query: int, n_key: int) -> np.ndarray | None:
        if self.kind == "bidirectional":
            return None
        if self.matrix.shape[-2:] != (n_query, n_key):
            raise ShapeError(
                f"mask of shape {self.matrix.shape} for scores ({n_query}, {n_key})"
            )
        return self.matrix


def _as_allowed(mask, n_query: int, n_key: int):
    if mask is None:
        return None
    if isinstance(mask, AttentionMask):
        return mask.allowed(n_query, n_key)
    mask = np.asarray(mask, dtype=float)
    if mask.shape[-2:] != (n_query, n_key):
        raise ShapeError(f"mask of shape {mask.shape} for scores ({n_query}, {n_key})")
    return mask


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention core over the last two axes.

    ``q``: (..., Lq, d); ``k``/``v``: (..., Lk, d). Masked positions get
    an additive bias of -1e9 and end up with exactly zero weight after
    the max-subtracted softmax. A fully masked query row is rejected
    because it would normalize over nothing.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention widths differ: q {q.shape}, k {k.shape}")
    if k.shape != v.shape:
        raise ShapeError(f"attention k/v shapes differ: {k.shape} vs {v.shape}")
    n_query, n_key = q.shape[-2], k.shape[-2]
    scale = 1.0 / math.sqrt(q.shape[-1])
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = (q @ dc.transpose(k, axes)) * scale
    allowed = _as_allowed(mask, n_query, n_key)
    if allowed is not None:
        if not np.all(allowed.sum(axis=-1) > 0):
            raise ContractError("attention mask leaves a query row with no keys")
        scores = scores + Tensor((1.0 - allowed) * MASK_BIAS)
    weights = dc.softmax(scores, axis=-1)
    return weights @ v


def _split_heads(x: Tensor, heads: int) -> Tensor:
    base = x.shape[:-2]
    length, width = x.shape[-2:]
    nb = len(base)
    x = dc.reshape(x, base + (length, heads, width // heads))
    return dc.transpose(x, tuple(range(nb)) + (nb + 1, nb, nb + 2))


def _merge_heads(x: Tensor) -> Tensor:
    base = x.shape[:-3]
    heads, length, dh = x.shape[-3:]
    nb = len(base)
    x = dc.transpose(x, tuple(range(nb)) + (nb + 1, nb, nb + 2))
    return dc.reshape(x, base + (length, heads * dh))


class MultiHeadAttention(Module):
    """Projected multi-head attention; queries and keys/values may come
    from different sequences (cross-attention)."""

    def __init__(self, d_model: int, heads: int, rng, zero_init_out: bool = False):
        if d_model % heads:
            raise ConfigError(f"width {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng, zero_init=zero_init_out)

    def __call__(self, x: Tensor, mask=None, memory: Tensor | None = None) -> Tensor:
        kv = x if memory is None else memory
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(kv), self.heads)
        v = _split_heads(self.wv(kv), self.heads)
        out = attention(q, k, v, mask)
        return self.wo(_merge_heads(out))


class FeedForward(Module):
    def __init__(self, d_model: int, ratio: int, rng, zero_init_out: bool = False):
        self.fc1 = Linear(d_model, ratio * d_model, rng)
        self.fc2 = Linear(ratio * d_model, d_model, rng, zero_init=zero_init_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(dc.gelu(self.fc1(x)))


def stochastic_depth(residual: Tensor, rate: float, training: bool, rng=None) -> Tensor:
    """Drop the residual branch per batch item (axis 0) with probability
    ``rate`` during training, rescaling survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"stochastic depth rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return residual
    if rng is None:
        raise ContractError("stochastic depth in training mode needs an rng")
    batch = residual.shape[0]
    keep = (rng.random(batch) >= rate).astype(residual.data.dtype) / (1.0 - rate)
    keep = keep.reshape((batch,) + (1,) * (residual.ndim - 1))
    return residual * Tensor(keep)


class TransformerBlock(Module):
    """Pre-norm residual block: x + Attn(LN(x)), then + FFN(LN(.))."""

    def __init__(self, d_model: int, heads: int, rng, ffn_ratio: int = 4,
                 drop_path: float = 0.0):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_ratio, rng)
        self.drop_path = drop_path

    def __call__(self, x: Tensor, mask=None, rng=None) -> Tensor:
        a = self.attn(self.ln1(x), mask)
        x = x + stochastic_depth(a, self.drop_path, self.training, rng)
        f = self.ffn(self.ln2(x))
        return x + stochastic_depth(f, self.drop_path, self.training, rng)
