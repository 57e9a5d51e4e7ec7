"""Pre-training losses: contrastive alignment, masked prediction, causal
next-token prediction, and their unweighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import tokens
from .diffcore import Tensor
from .errors import ContractError, DataError


@dataclass
class ContrastiveBatch:
    """Paired unit-norm embeddings and the softmax temperature."""

    video_emb: Tensor  # (B, d_e), rows unit norm
    text_emb: Tensor  # (B, d_e), rows unit norm
    tau: Tensor  # positive scalar, learnable

    def __post_init__(self):
        for name, emb in (("video", self.video_emb), ("text", self.text_emb)):
            norms = np.linalg.norm(emb.data, axis=-1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ContractError(f"{name} embeddings are not unit norm")
        if self.tau.data.size != 1 or float(self.tau.data.reshape(())) <= 0:
            raise ContractError("temperature must be a positive scalar")

    @property
    def batch_size(self):
        return self.video_emb.shape[0]


def vtc_loss(batch: ContrastiveBatch, symmetric: bool = True) -> Tensor:
    """Temperature-scaled contrastive loss over cosine similarities.

    The matching index is the target in both directions; ``symmetric``
    averages video-to-text and text-to-video (the one-directional
    video-to-text form is kept behind the flag for fidelity tests).
    """
    b = batch.batch_size
    if b < 2:
        raise ContractError("contrastive loss needs at least 2 pairs")
    sim = batch.video_emb @ dc.transpose(batch.text_emb)
    logits = sim * dc.pow_scalar(batch.tau, -1.0)
    targets = np.arange(b)
    v2t = dc.cross_entropy(logits, targets).mean()
    if not symmetric:
        return v2t
    t2v = dc.cross_entropy(dc.transpose(logits), targets).mean()
    return (v2t + t2v) * 0.5


@dataclass
class MaskingPlan:
    """Which caption positions were hidden and what stood there."""

    positions: np.ndarray  # (n, 2) rows of (batch index, position)
    original_ids: np.ndarray  # (n,)
    replaced_with: np.ndarray  # (n,) ids actually placed in the input

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)
        self.original_ids = np.asarray(self.original_ids, dtype=np.int64)
        self.replaced_with = np.asarray(self.replaced_with, dtype=np.int64)

    def __len__(self):
        return len(self.original_ids)


def build_mlm_plan(ids: np.ndarray, eos_positions: np.ndarray, rng,
                   vocab_size: int, mask_prob: float = 0.15):
    """BERT-recipe masking over caption content tokens.

    Selects ~``mask_prob`` of the positions strictly between the leading
    [CLS] and the [EOS]; 80% become [MASK], 10% a random content token,
    10% stay. At least one position is always selected. Returns the plan
    and the modified id matrix.
    """
    masked = ids.copy()
    candidates = [
        (b, p)
        for b in range(ids.shape[0])
        for p in range(1, int(eos_positions[b]))
    ]
    picks = [bp for bp in candidates if rng.random() < mask_prob]
    if not picks:
        picks = [candidates[rng.integers(len(candidates))]]
    originals, placed = [], []
    for b, p in picks:
        originals.append(ids[b, p])
        roll = rng.random()
        if roll < 0.8:
            rep = tokens.MASK
        elif roll < 0.9:
            rep = int(rng.integers(tokens.N_SPECIALS, vocab_size))
        else:
            rep = ids[b, p]
        placed.append(rep)
        masked[b, p] = rep
    plan = MaskingPlan(np.array(picks), np.array(originals), np.array(placed))
    return plan, masked


def ce_mean_at(logits: Tensor, positions: np.ndarray, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of (B, L, V) logits at (batch, pos) rows."""
    b, length, vocab = logits.shape
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    rows = positions[:, 0] * length + positions[:, 1]
    flat = dc.reshape(logits, (b * length, vocab))
    return dc.cross_entropy(dc.take_rows(flat, rows), targets).mean()


def mlm_loss(logits: Tensor, plan: MaskingPlan) -> Tensor:
    """Mean cross-entropy over the masked positions only."""
    if len(plan) == 0:
        raise ContractError("masking plan is empty")
    return ce_mean_at(logits, plan.positions, plan.original_ids)


def unilm_loss(logits: Tensor, ids: np.ndarray, eos_positions: np.ndarray) -> Tensor:
    """Next-token cross-entropy through [EOS]: position t predicts t+1."""
    eos_positions = np.asarray(eos_positions, dtype=np.int64)
    for b, e in enumerate(eos_positions):
        if ids[b, e] != tokens.EOS:
            raise DataError(f"sequence {b} has no [EOS] at its stated position")
    preds, targets = [], []
    for b in range(ids.shape[0]):
        for t in range(int(eos_positions[b])):
            preds.append((b, t))
            targets.append(ids[b, t + 1])
    return ce_mean_at(logits, np.array(preds), np.array(targets))


def vqa_loss(logits: Tensor, ids_original: np.ndarray, answer_spans,
             masked_positions, eos_positions: np.ndarray) -> Tensor:
    """Causal loss restricted to masked answer tokens and the [EOS].

    ``answer_spans`` is unused beyond validation that answers exist;
    scoring covers each masked answer position plus the [EOS], predicted
    from the preceding position.
    """
    preds, targets = [], []
    for b in range(ids_original.shape[0]):
        span = answer_spans[b]
        if span[1] <= span[0]:
            raise DataError(f"sample {b} has an empty answer")
        for p in masked_positions[b]:
            preds.append((b, p - 1))
            targets.append(ids_original[b, p])
        e = int(eos_positions[b])
        preds.append((b, e - 1))
        targets.append(ids_original[b, e])
    return ce_mean_at(logits, np.array(preds), np.array(targets))


def total_loss(vtc: Tensor, mlm: Tensor, unilm: Tensor) -> Tensor:
    """Unweighted sum of the three objectives."""
    return vtc + mlm + unilm
