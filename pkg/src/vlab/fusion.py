"""Multimodal encoder: text self-attention plus cross-attention over one
or two visual memories, composed by stack or parallel blending.

The same stack serves masked prediction (bidirectional pattern) and
generation (causal pattern); the pattern is fixed for a whole forward
pass. Visual memories are projected to the encoder width by per-source
linear maps before cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nn
from .diffcore import Tensor
from .errors import ConfigError

BLEND_MODES = ("single", "stack", "parallel")
PATTERNS = ("bidirectional", "causal")


@dataclass
class BlendConfig:
    """How the two visual memories combine inside each block.

    ``single`` uses only the video branch; ``stack`` chains the image
    cross-attention into the video one; ``parallel`` mixes both branches
    with learnable scalars. ``share_cross_attn`` makes the two branches
    one parameter set.
    """

    mode: str = "parallel"
    share_cross_attn: bool = True

    def __post_init__(self):
        if self.mode not in BLEND_MODES:
            raise ConfigError(f"unknown blend mode {self.mode!r}, pick from {BLEND_MODES}")


class FusedBlock(nn.Module):
    """Pre-norm block: self-attention, blended cross-attention (one
    residual around the whole composed stage), feed-forward."""

    def __init__(self, d_model: int, heads: int, rng, share: bool,
                 single: bool, ffn_ratio: int = 4, drop_path: float = 0.0):
        self.ln_sa = nn.LayerNorm(d_model)
        self.sa = nn.MultiHeadAttention(d_model, heads, rng)
        self.ln_ca = nn.LayerNorm(d_model)
        self.ca_v = nn.MultiHeadAttention(d_model, heads, rng)
        self.ca_i = None if (share or single) else nn.MultiHeadAttention(d_model, heads, rng)
        self.ln_f = nn.LayerNorm(d_model)
        self.ffn = nn.FeedForward(d_model, ffn_ratio, rng)
        self.drop_path = drop_path

    def _image_branch(self):
        return self.ca_i if self.ca_i is not None else self.ca_v

    def __call__(self, x: Tensor, mem_v: Tensor, mem_i, mode: str,
                 alpha, beta, mask, rng=None) -> Tensor:
        sd = lambda t: nn.stochastic_depth(t, self.drop_path, self.training, rng)
        x = x + sd(self.sa(self.ln_sa(x), mask))
        h = self.ln_ca(x)
        if mode == "single":
            cross = self.ca_v(h, memory=mem_v)
        elif mode == "stack":
            cross = self.ca_v(self._image_branch()(h, memory=mem_i), memory=mem_v)
        else:
            cross = alpha * self.ca_v(h, memory=mem_v) + beta * self._image_branch()(
                h, memory=mem_i
            )
        x = x + sd(cross)
        return x + sd(self.ffn(self.ln_f(x)))


class MultimodalEncoder(nn.Module):
    """Token embedding, fused blocks, tied-embedding output head."""

    def __init__(self, vocab_size: int, d_model: int, heads: int, depth: int,
                 l_max: int, mem_dim: int, cfg: BlendConfig, rng,
                 ffn_ratio: int = 4, drop_path: float = 0.0):
        self.cfg = cfg
        self.l_max = l_max
        self.token_emb = nn.param(rng, (vocab_size, d_model))
        self.pos = nn.param(rng, (l_max, d_model))
        self.blocks = [
            FusedBlock(d_model, heads, rng, cfg.share_cross_attn,
                       cfg.mode == "single", ffn_ratio, drop_path)
            for _ in range(depth)
        ]
        self.ln_out = nn.LayerNorm(d_model)
        self.mem_proj_v = nn.Linear(mem_dim, d_model, rng)
        # sharing covers the whole cross-attention stage, memory projection included
        need_i_proj = cfg.mode != "single" and not cfg.share_cross_attn
        self.mem_proj_i = nn.Linear(mem_dim, d_model, rng) if need_i_proj else None
        if cfg.mode == "parallel":
            self.alpha = nn.param(rng, (), 0.0)
            self.alpha.data[()] = 0.5
            self.beta = nn.param(rng, (), 0.0)
            self.beta.data[()] = 0.5
        else:
            self.alpha = self.beta = None

    def _pattern_mask(self, length: int, pattern: str, pad_mask):
        if pattern == "causal":
            return nn.AttentionMask.causal(length)
        if pad_mask is None:
            return None
        # bidirectional with padding: every query sees exactly the real tokens
        return np.broadcast_to(
            pad_mask[:, None, None, :], (pad_mask.shape[0], 1, length, length)
        )

    def __call__(self, ids: np.ndarray, pattern: str, mem_v: Tensor,
                 mem_i: Tensor | None = None, pad_mask=None, rng=None) -> Tensor:
        """Fused forward to vocabulary logits (B, L, V)."""
        if pattern not in PATTERNS:
            raise ConfigError(f"unknown attention pattern {pattern!r}")
        if self.cfg.mode != "single" and mem_i is None:
            raise ConfigError(f"blend mode {self.cfg.mode!r} needs the image memory")
        if mem_v.shape[1] == 0:
            raise ConfigError("empty visual memory")
        b, length = ids.shape
        x = dc.reshape(dc.take_rows(self.token_emb, ids.reshape(-1)), (b, length, -1))
        x = x + self.pos[:length]
        mv = self.mem_proj_v(mem_v)
        mi = None
        if self.cfg.mode != "single":
            mi = (self.mem_proj_i or self.mem_proj_v)(mem_i)
        mask = self._pattern_mask(length, pattern, pad_mask)
        for block in self.blocks:
            x = block(x, mv, mi, self.cfg.mode, self.alpha, self.beta, mask, rng)
        x = self.ln_out(x)
        return x @ dc.transpose(self.token_emb)
