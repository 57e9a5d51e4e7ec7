"""CLIP-style text encoder: causal transformer over token embeddings,
pooled sentence embedding read at the [EOS] position."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nn
from . import tokens
from .diffcore import Tensor
from .errors import DataError

log = logging.getLogger(__name__)


@dataclass
class TokenSeq:
    """Token ids ending in exactly one [EOS]."""

    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if (self.ids == tokens.EOS).sum() != 1 or self.ids[-1] != tokens.EOS:
            raise DataError("token sequence must end in exactly one [EOS]")

    def __len__(self):
        return len(self.ids)


def pad_batch(seqs: list, l_max: int):
    """Right-pad sequences to a fixed length, truncating (with the [EOS]
    restored at the end) when a sequence is overlong.

    Returns (ids (B, L) int array, eos_positions (B,), pad_mask (B, L)).
    """
    ids = np.full((len(seqs), l_max), tokens.PAD, dtype=np.int64)
    eos = np.zeros(len(seqs), dtype=np.int64)
    for i, seq in enumerate(seqs):
        row = seq.ids
        if len(row) > l_max:
            log.warning("truncating %d-token sequence to %d", len(row), l_max)
            row = np.concatenate([row[: l_max - 1], [tokens.EOS]])
        ids[i, : len(row)] = row
        eos[i] = len(row) - 1
    pad_mask = np.zeros((len(seqs), l_max))
    for i, e in enumerate(eos):
        pad_mask[i, : e + 1] = 1.0
    return ids, eos, pad_mask


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, width: int, heads: int, depth: int,
                 l_max: int, joint_dim: int, rng):
        self.l_max = l_max
        self.token_emb = nn.param(rng, (vocab_size, width))
        self.pos = nn.param(rng, (l_max, width))
        self.blocks = [nn.TransformerBlock(width, heads, rng) for _ in range(depth)]
        self.ln_final = nn.LayerNorm(width)
        self.proj = nn.Linear(width, joint_dim, rng)

    def encode(self, ids: np.ndarray, eos_positions: np.ndarray, rng=None):
        """Run padded id rows (B, L); returns (states (B, L, w), pooled (B, j))."""
        b, length = ids.shape
        x = dc.reshape(dc.take_rows(self.token_emb, ids.reshape(-1)), (b, length, -1))
        x = x + self.pos[:length]
        mask = nn.AttentionMask.causal(length)
        for block in self.blocks:
            x = block(x, mask, rng)
        states = self.ln_final(x)
        flat = dc.reshape(states, (b * length, -1))
        at_eos = dc.take_rows(flat, np.arange(b) * length + eos_positions)
        return states, nn.l2_normalize(self.proj(at_eos))

    def __call__(self, seqs: list, rng=None):
        ids, eos, _ = pad_batch(seqs, self.l_max)
        return self.encode(ids, eos, rng)
