"""Flat key=value run configuration: parse, validate, hash.

Every key is declared in ``CONFIG_KEYS`` with a type, default, and help
line; unknown keys are rejected at parse time. The canonical rendering
(sorted ``key=value`` lines) feeds the config hash that commands print
and checkpoints/results embed.
"""

from __future__ import annotations

import hashlib
import os

from .errors import ConfigError
from .model import ModelConfig
from .pipeline import StageConfig


def _bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# key -> (parser, default, help)
CONFIG_KEYS = {
    "seed": (int, 0, "master seed for init, data order, and regularization"),
    "frames": (int, 4, "frames sampled per clip (sparse segment sampling)"),
    "image_size": (int, 16, "square frame resolution in pixels"),
    "patch_size": (int, 4, "vision patch edge; must divide image_size"),
    "vision_width": (int, 32, "vision transformer width"),
    "vision_heads": (int, 2, "vision attention heads"),
    "vision_depth": (int, 4, "vision transformer blocks"),
    "adapter_layers": (str, "last4", "video adapter placement: last4 | all | none | comma list"),
    "adapter_width": (int, 8, "adapter bottleneck channels"),
    "adapter_kernel": (int, 3, "dynamic-convolution kernel edge"),
    "adapter_residual": (_bool, True, "adapter adds to (true) or replaces (false) features"),
    "text_width": (int, 32, "text encoder width"),
    "text_heads": (int, 2, "text attention heads"),
    "text_depth": (int, 2, "text encoder blocks"),
    "fusion_width": (int, 32, "multimodal encoder width"),
    "fusion_heads": (int, 2, "multimodal attention heads"),
    "fusion_depth": (int, 4, "multimodal encoder blocks"),
    "joint_dim": (int, 32, "shared contrastive embedding width"),
    "l_max": (int, 16, "maximum token sequence length"),
    "ffn_ratio": (int, 4, "feed-forward expansion ratio"),
    "blend_mode": (str, "parallel", "blending for stage 3: stack | parallel | single"),
    "share_cross_attn": (_bool, True, "one cross-attention parameter set for both memories"),
    "steps_adapt": (int, 50, "stage-1 steps (full-scale schedule: 20 epochs)"),
    "steps_tune": (int, 50, "stage-2 steps (full-scale schedule: 20 epochs)"),
    "steps_blend": (int, 25, "stage-3 steps (full-scale schedule: 10 epochs)"),
    "batch_size": (int, 8, "training batch size (contrastive loss needs >= 2)"),
    "lr_new": (float, 5e-3, "learning rate for adapters/fusion/projections"),
    "lr_backbone": (float, 2.5e-5, "learning rate for backbone encoders (1:200 of lr_new)"),
    "grad_clip": (float, 1.0, "global gradient-norm clip; 0 disables"),
    "drop_path": (float, 0.1, "stochastic depth rate while training"),
    "mlm_mask_prob": (float, 0.15, "masked-token fraction for masked prediction"),
    "answer_mask_prob": (float, 1.0, "answer-token masking rate for VQA tuning"),
    "vtc_symmetric": (_bool, True, "average both contrastive directions"),
    "retrieval_blend": (str, "mean", "blended video embedding: mean | adapted"),
    "dual_softmax_t": (float, 100.0, "dual-softmax temperature at test time"),
    "use_dual_softmax": (_bool, True, "rescore retrieval with dual softmax"),
    "eval_max_len": (int, 16, "generation length cap"),
    "eval_beam": (int, 1, "beam width for generation (1 = greedy)"),
    "unfreeze_text_in_blend": (_bool, False, "train the text encoder during stage 3"),
    "unfreeze_image_in_blend": (_bool, False, "train the plain image encoder during stage 3"),
    "unfreeze_adapted_in_blend": (_bool, False, "train the adapted encoder during stage 3"),
}


class RunConfig:
    """Validated flat configuration with a stable hash."""

    def __init__(self, overrides: dict | None = None):
        self.values = {k: spec[1] for k, spec in CONFIG_KEYS.items()}
        for key, raw in (overrides or {}).items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            parser = CONFIG_KEYS[key][0]
            try:
                self.values[key] = parser(raw)
            except (ValueError, TypeError):
                raise ConfigError(f"bad value for {key}: {raw!r}")
        env_seed = os.environ.get("VLAB_SEED")
        if env_seed is not None:
            try:
                self.values["seed"] = int(env_seed)
            except ValueError:
                raise ConfigError(f"VLAB_SEED must be an integer, got {env_seed!r}")

    @classmethod
    def load(cls, path) -> "RunConfig":
        overrides = {}
        try:
            with open(path) as f:
                for lineno, line in enumerate(f, 1):
                    stripped = line.strip()
                    if not stripped or stripped.startswith("#"):
                        continue
                    if "=" not in stripped:
                        raise ConfigError(f"{path}:{lineno}: expected key=value")
                    key, _, value = stripped.partition("=")
                    overrides[key.strip()] = value.strip()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        return cls(overrides)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        overrides = {}
        for line in text.splitlines():
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, _, value = stripped.partition("=")
            overrides[key.strip()] = value.strip()
        return cls(overrides)

    def __getitem__(self, key):
        return self.values[key]

    def canonical_text(self) -> str:
        return "".join(f"{k}={self.values[k]}\n" for k in sorted(self.values))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:12]

    def model_config(self, stage: str | None = None) -> ModelConfig:
        """Model hyperparameters; stages before blending run single-memory."""
        v = self.values
        blend = v["blend_mode"] if stage == "blend" else "single"
        return ModelConfig(
            image_size=v["image_size"], patch_size=v["patch_size"],
            frames=v["frames"],
            vision_width=v["vision_width"], vision_heads=v["vision_heads"],
            vision_depth=v["vision_depth"],
            adapter_layers=v["adapter_layers"], adapter_width=v["adapter_width"],
            adapter_kernel=v["adapter_kernel"], adapter_residual=v["adapter_residual"],
            text_width=v["text_width"], text_heads=v["text_heads"],
            text_depth=v["text_depth"],
            fusion_width=v["fusion_width"], fusion_heads=v["fusion_heads"],
            fusion_depth=v["fusion_depth"],
            joint_dim=v["joint_dim"], l_max=v["l_max"], ffn_ratio=v["ffn_ratio"],
            blend_mode=blend, share_cross_attn=v["share_cross_attn"],
            mlm_mask_prob=v["mlm_mask_prob"], answer_mask_prob=v["answer_mask_prob"],
            vtc_symmetric=v["vtc_symmetric"], retrieval_blend=v["retrieval_blend"],
        )

    def stage_config(self, stage: str) -> StageConfig:
        v = self.values
        steps = {"adapt": v["steps_adapt"], "tune": v["steps_tune"],
                 "blend": v["steps_blend"]}
        return StageConfig(
            stage=stage, steps=steps[stage], batch_size=v["batch_size"],
            seed=v["seed"], lr_new=v["lr_new"], lr_backbone=v["lr_backbone"],
            grad_clip=v["grad_clip"], drop_path=v["drop_path"],
            unfreeze_text=v["unfreeze_text_in_blend"],
            unfreeze_image=v["unfreeze_image_in_blend"],
            unfreeze_adapted=v["unfreeze_adapted_in_blend"],
        )


def describe_keys() -> str:
    lines = ["available config keys (key = default): help"]
    for key, (_, default, help_text) in CONFIG_KEYS.items():
        lines.append(f"  {key} = {default}: {help_text}")
    return "\n".join(lines)
