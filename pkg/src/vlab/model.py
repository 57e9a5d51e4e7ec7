"""Full architecture assembly: two vision encoders, text encoder,
multimodal encoder, temperature, and the combined training objective.

The adapted encoder (with video adapters) and the plain image encoder
are both always constructed so parameter names stay stable across
training stages; blending modes decide which memories feed the
multimodal encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nn
from . import objectives as obj
from . import tokens
from .diffcore import Tensor
from .errors import ConfigError
from .fusion import BlendConfig, MultimodalEncoder
from .textenc import TextEncoder
from .vision import VisionEncoder

VOCAB_SIZE = 64


@dataclass
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    frames: int = 4
    max_frames: int = 8
    vision_width: int = 32
    vision_heads: int = 2
    vision_depth: int = 4
    adapter_layers: str = "last4"
    adapter_width: int = 8
    adapter_kernel: int = 3
    adapter_residual: bool = True
    text_width: int = 32
    text_heads: int = 2
    text_depth: int = 2
    fusion_width: int = 32
    fusion_heads: int = 2
    fusion_depth: int = 4
    joint_dim: int = 32
    l_max: int = 16
    ffn_ratio: int = 4
    blend_mode: str = "single"
    share_cross_attn: bool = True
    drop_path: float = 0.0
    mlm_mask_prob: float = 0.15
    answer_mask_prob: float = 1.0
    vtc_symmetric: bool = True
    retrieval_blend: str = "mean"  # mean | adapted
    tau_init: float = 0.07

    def adapter_layer_indices(self) -> tuple:
        spec = str(self.adapter_layers)
        if spec in ("none", ""):
            return ()
        if spec == "all":
            return tuple(range(self.vision_depth))
        if spec == "last4":
            return tuple(range(max(0, self.vision_depth - 4), self.vision_depth))
        try:
            idx = tuple(sorted(int(s) for s in spec.split(",")))
        except ValueError:
            raise ConfigError(f"bad adapter_layers value {spec!r}")
        return idx


class VLABModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.vision_adapted = VisionEncoder(
            cfg.image_size, cfg.patch_size, cfg.channels, cfg.vision_width,
            cfg.vision_heads, cfg.vision_depth, cfg.joint_dim, rng,
            adapter_layers=cfg.adapter_layer_indices(),
            adapter_width=cfg.adapter_width, max_frames=cfg.max_frames,
            adapter_kernel=cfg.adapter_kernel, adapter_residual=cfg.adapter_residual,
            ffn_ratio=cfg.ffn_ratio, drop_path=cfg.drop_path,
        )
        self.vision_image = VisionEncoder(
            cfg.image_size, cfg.patch_size, cfg.channels, cfg.vision_width,
            cfg.vision_heads, cfg.vision_depth, cfg.joint_dim, rng,
            adapter_layers=(), ffn_ratio=cfg.ffn_ratio, drop_path=cfg.drop_path,
        )
        self.text = TextEncoder(VOCAB_SIZE, cfg.text_width, cfg.text_heads,
                                cfg.text_depth, cfg.l_max, cfg.joint_dim, rng)
        self.fusion = MultimodalEncoder(
            VOCAB_SIZE, cfg.fusion_width, cfg.fusion_heads, cfg.fusion_depth,
            cfg.l_max, cfg.vision_width,
            BlendConfig(cfg.blend_mode, cfg.share_cross_attn), rng,
            ffn_ratio=cfg.ffn_ratio, drop_path=cfg.drop_path,
        )
        self.temperature = nn.param(rng, (), 0.0)
        self.temperature.data[()] = cfg.tau_init

    # -- encoding -------------------------------------------------------

    @property
    def uses_image_memory(self) -> bool:
        return self.cfg.blend_mode != "single"

    def encode_frames(self, frames: Tensor, rng=None):
        """Run whichever vision encoders the blend mode needs."""
        feats_a, pooled_a = self.vision_adapted(frames, rng)
        feats_i = pooled_i = None
        if self.uses_image_memory:
            feats_i, pooled_i = self.vision_image(frames, rng)
        return feats_a, pooled_a, feats_i, pooled_i

    def video_embedding_from_pooled(self, pooled_a: Tensor, pooled_i) -> Tensor:
        if not self.uses_image_memory or self.cfg.retrieval_blend == "adapted":
            return pooled_a
        return nn.l2_normalize((pooled_a + pooled_i) * 0.5)

    def video_embedding(self, frames: Tensor, rng=None) -> Tensor:
        """Pooled joint-space embedding for retrieval/contrastive use."""
        _, pooled_a, _, pooled_i = self.encode_frames(frames, rng)
        return self.video_embedding_from_pooled(pooled_a, pooled_i)

    def text_embedding(self, seqs: list, rng=None) -> Tensor:
        _, pooled = self.text(seqs, rng)
        return pooled

    # -- fusion sequences -------------------------------------------------

    def caption_rows(self, seqs: list):
        """[CLS] + caption ids, padded: returns (ids, eos_positions, pad_mask)."""
        ids = np.full((len(seqs), self.cfg.l_max), tokens.PAD, dtype=np.int64)
        eos = np.zeros(len(seqs), dtype=np.int64)
        pad_mask = np.zeros((len(seqs), self.cfg.l_max))
        for i, seq in enumerate(seqs):
            row = np.concatenate([[tokens.CLS], seq.ids])
            if len(row) > self.cfg.l_max:
                row = np.concatenate([row[: self.cfg.l_max - 1], [tokens.EOS]])
            ids[i, : len(row)] = row
            eos[i] = len(row) - 1
            pad_mask[i, : len(row)] = 1.0
        return ids, eos, pad_mask

    def qa_rows(self, questions: list, answers: list, mask_answers: bool, rng=None):
        """[CLS] q [SEP] a [EOS] rows plus the answer masking bookkeeping."""
        b = len(questions)
        ids = np.full((b, self.cfg.l_max), tokens.PAD, dtype=np.int64)
        eos = np.zeros(b, dtype=np.int64)
        spans, masked_positions = [], []
        for i, (q, a) in enumerate(zip(questions, answers)):
            row = np.concatenate(
                [[tokens.CLS], q.ids[:-1], [tokens.SEP], a.ids[:-1], [tokens.EOS]]
            )
            if len(row) > self.cfg.l_max:
                raise ConfigError(
                    f"qa sequence of {len(row)} tokens exceeds l_max {self.cfg.l_max}"
                )
            ids[i, : len(row)] = row
            eos[i] = len(row) - 1
            a_start = 2 + len(q.ids) - 1
            spans.append((a_start, int(eos[i])))
            masked_positions.append(
                [p for p in range(a_start, int(eos[i]))
                 if mask_answers and (self.cfg.answer_mask_prob >= 1.0
                                      or rng.random() < self.cfg.answer_mask_prob)]
            )
        masked_ids = ids.copy()
        for i, plist in enumerate(masked_positions):
            for p in plist:
                masked_ids[i, p] = tokens.MASK
        return ids, masked_ids, eos, spans, masked_positions

    # -- objectives -------------------------------------------------------

    def compute_losses(self, frames: Tensor, captions: list, rng) -> dict:
        """All three pre-training losses and their sum, one tape."""
        feats_a, pooled_a, feats_i, pooled_i = self.encode_frames(frames, rng)
        video_emb = self.video_embedding_from_pooled(pooled_a, pooled_i)
        text_emb = self.text_embedding(captions, rng)
        vtc = obj.vtc_loss(
            obj.ContrastiveBatch(video_emb, text_emb, self.temperature),
            symmetric=self.cfg.vtc_symmetric,
        )

        mem_v = feats_a.flat_tokens()
        mem_i = feats_i.flat_tokens() if feats_i is not None else None
        ids, eos, pad_mask = self.caption_rows(captions)

        plan, masked_ids = obj.build_mlm_plan(ids, eos, rng, VOCAB_SIZE,
                                              self.cfg.mlm_mask_prob)
        mlm_logits = self.fusion(masked_ids, "bidirectional", mem_v, mem_i,
                                 pad_mask=pad_mask, rng=rng)
        mlm = obj.mlm_loss(mlm_logits, plan)

        lm_logits = self.fusion(ids, "causal", mem_v, mem_i, rng=rng)
        unilm = obj.unilm_loss(lm_logits, ids, eos)

        total = obj.total_loss(vtc, mlm, unilm)
        return {"vtc": vtc, "mlm": mlm, "unilm": unilm, "total": total}

    def vqa_finetune_loss(self, frames: Tensor, questions: list, answers: list, rng) -> Tensor:
        """Causal loss on masked answer tokens and [EOS], question visible."""
        feats_a, _, feats_i, _ = self.encode_frames(frames, rng)
        mem_v = feats_a.flat_tokens()
        mem_i = feats_i.flat_tokens() if feats_i is not None else None
        ids, masked_ids, eos, spans, masked_positions = self.qa_rows(
            questions, answers, mask_answers=True, rng=rng
        )
        logits = self.fusion(masked_ids, "causal", mem_v, mem_i, rng=rng)
        return obj.vqa_loss(logits, ids, spans, masked_positions, eos)

    # -- generation interface ---------------------------------------------

    def step_logits_fn(self, frames: Tensor):
        """Closure for autoregressive decoding: prefix ids -> last logits.

        Visual memories are computed once and reused per step.
        """
        feats_a, _, feats_i, _ = self.encode_frames(frames)
        mem_v = feats_a.flat_tokens().detach()
        mem_i = feats_i.flat_tokens().detach() if feats_i is not None else None

        def step(prefix_ids) -> np.ndarray:
            arr = np.asarray(prefix_ids, dtype=np.int64).reshape(1, -1)
            with dc.no_grad():
                logits = self.fusion(arr, "causal", mem_v, mem_i)
            return logits.data[0, -1]

        return step

    # -- state ------------------------------------------------------------

    def state_arrays(self) -> dict:
        return {name: p.data for name, p in self.named_parameters().items()}

    def load_state(self, arrays: dict, strict: bool = False):
        """Assign matching parameter arrays; unknown/missing names are
        tolerated (new stages introduce fresh modules) unless strict."""
        params = self.named_parameters()
        missing = [n for n in params if n not in arrays]
        unknown = [n for n in arrays if n not in params and not n.startswith("_meta.")]
        if strict and (missing or unknown):
            raise ConfigError(f"state mismatch: missing {missing}, unknown {unknown}")
        for name, p in params.items():
            if name in arrays:
                arr = np.asarray(arrays[name], dtype=p.data.dtype)
                if arr.shape != p.data.shape:
                    raise ConfigError(
                        f"checkpoint entry {name} has shape {arr.shape}, "
                        f"model expects {p.data.shape}"
                    )
                p.data = arr.copy()
        return missing, unknown
