"""Training orchestration: the staged schedule (adaptive transferring,
integrated tuning, blending), freeze masks, Adam with per-group learning
rates, sparse frame sampling, checkpointing, metrics logging."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .diffcore import Tensor, read_tensor, write_tensor
from .errors import ConfigError, DataError, NumericError

log = logging.getLogger(__name__)

STAGES = ("adapt", "tune", "blend")
_STAGE_ALIASES = {
    "adapt": "adapt",
    "adaptive_transferring": "adapt",
    "tune": "tune",
    "integrated_tuning": "tune",
    "blend": "blend",
    "blending": "blend",
}

TAU_MIN, TAU_MAX = 1e-3, 1.0


def resolve_stage(name: str) -> str:
    try:
        return _STAGE_ALIASES[name]
    except KeyError:
        raise ConfigError(f"unknown stage {name!r}; use one of {sorted(_STAGE_ALIASES)}")


@dataclass
class StageConfig:
    stage: str
    steps: int
    batch_size: int
    seed: int
    lr_new: float = 5e-3
    lr_backbone: float = 2.5e-5  # paper ratio 1:200, scaled up for desk runs
    grad_clip: float = 1.0
    drop_path: float = 0.1
    unfreeze_text: bool = False
    unfreeze_image: bool = False
    unfreeze_adapted: bool = False

    def __post_init__(self):
        self.stage = resolve_stage(self.stage)
        if self.steps <= 0 or self.batch_size <= 0:
            raise ConfigError("steps and batch size must be positive")
        if self.batch_size < 2:
            raise ConfigError("contrastive training needs batch size >= 2")


def param_group(name: str) -> str:
    """Learning-rate group: pre-trained-style backbone vs new modules."""
    parts = name.split(".")
    if parts[0] in ("vision_adapted", "vision_image", "text"):
        if parts[1] in ("proj", "adapters"):
            return "new"
        return "backbone"
    return "new"  # fusion, temperature


@dataclass
class FreezeMask:
    """Named-parameter -> trainable map realizing one training stage."""

    trainable: dict

    def validate_against(self, model) -> None:
        names = set(model.named_parameters())
        if set(self.trainable) != names:
            extra = set(self.trainable) - names
            missing = names - set(self.trainable)
            raise ConfigError(f"freeze mask mismatch: extra {extra}, missing {missing}")

    def apply(self, model) -> None:
        self.validate_against(model)
        for name, p in model.named_parameters().items():
            p.requires_grad = self.trainable[name]

    def frozen_names(self):
        return [n for n, t in self.trainable.items() if not t]


def build_freeze_mask(model, stage: str, unfreeze_text: bool = False,
                      unfreeze_image: bool = False,
                      unfreeze_adapted: bool = False) -> FreezeMask:
    """Stage 1 trains only new modules; stage 2 trains everything;
    stage 3 trains the fusion side with every encoder frozen (flags
    open the text, plain-image, or adapted encoders back up)."""
    stage = resolve_stage(stage)
    mapping = {}
    for name in model.named_parameters():
        parts = name.split(".")
        if stage == "tune":
            trainable = True
        elif stage == "adapt":
            trainable = param_group(name) == "new"
        else:
            trainable = (
                name == "temperature"
                or parts[0] == "fusion"
                or (len(parts) > 1 and parts[1] == "proj")
            )
            if unfreeze_text and parts[0] == "text":
                trainable = True
            if unfreeze_image and parts[0] == "vision_image":
                trainable = True
            if unfreeze_adapted and parts[0] == "vision_adapted":
                trainable = True
        mapping[name] = trainable
    return FreezeMask(mapping)


# -- optimizer -----------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, trainable: dict, lrs: dict, state: AdamState,
              grad_clip: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam over the trainable subset.

    ``lrs`` maps group name (see ``param_group``) to a learning rate.
    Gradients are clipped to ``grad_clip`` global norm first (0 disables).
    A NaN gradient aborts, naming the parameter, before any update.
    """
    live = [
        (name, p) for name, p in params.items()
        if trainable.get(name, True) and p.grad is not None
    ]
    for name, p in live:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")

    scale = 1.0
    if grad_clip > 0 and live:
        norm = math.sqrt(sum(float((p.grad**2).sum()) for _, p in live))
        if norm > grad_clip:
            scale = grad_clip / norm

    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in live:
        g = p.grad * scale
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g**2 if v is None else beta2 * v + (1 - beta2) * g**2
        state.m[name] = m
        state.v[name] = v
        lr = lrs[param_group(name)]
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- frame sampling --------------------------------------------------------


def sample_frames(video_length: int, n: int, training: bool = False, rng=None) -> list:
    """Split the clip into ``n`` equal segments and pick one index per
    segment: uniform within the segment when training, segment center
    when evaluating. Short clips repeat the last index (logged)."""
    if video_length < 1:
        raise DataError(f"video length must be >= 1, got {video_length}")
    if n > video_length:
        log.warning("padding %d frames to %d samples", video_length, n)
        picks = list(range(video_length))
        return picks + [video_length - 1] * (n - video_length)
    picks = []
    for i in range(n):
        lo = i * video_length // n
        hi = (i + 1) * video_length // n
        if training:
            picks.append(int(rng.integers(lo, hi)))
        else:
            picks.append(lo + (hi - lo) // 2)
    return picks


# -- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"VLABCKPT"


def save_checkpoint(path, arrays: dict) -> None:
    """Entries sorted by name: u16 name length, name, tensor record."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            write_tensor(f, arrays[name])


def load_checkpoint(path) -> dict:
    try:
        f = open(path, "rb")
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}")
    with f:
        if f.read(8) != CKPT_MAGIC:
            raise DataError(f"{path} is not a checkpoint (bad magic)")
        (count,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            arrays[name] = read_tensor(f)
    return arrays


def encode_meta_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_meta_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def checkpoint_stage(arrays: dict) -> str | None:
    if "_meta.stage" not in arrays:
        return None
    return STAGES[int(arrays["_meta.stage"].reshape(()))]


# -- drop-path control -------------------------------------------------------


def set_drop_path(module, rate: float) -> None:
    """Propagate a stochastic-depth rate to every block that has one."""
    if hasattr(module, "drop_path"):
        module.drop_path = rate
    for value in vars(module).values():
        if isinstance(value, nn.Module):
            set_drop_path(value, rate)
        elif isinstance(value, (list, tuple)):
            for item in value:
                if isinstance(item, nn.Module):
                    set_drop_path(item, rate)


# -- the training loop --------------------------------------------------------


def run_stage(cfg: StageConfig, corpus, model, ckpt_path, metrics_path=None,
              config_text: str = "") -> list:
    """Seeded, deterministic loop minimizing the summed objective.

    Emits per-step loss components (returned, and written as JSON lines
    when ``metrics_path`` is given) plus a checkpoint carrying the model
    state and config/stage metadata. Frozen parameters are bit-identical
    between entry and exit. A non-finite loss aborts, saving the last
    good state.
    """
    from . import data as data_mod

    freeze = build_freeze_mask(model, cfg.stage, cfg.unfreeze_text,
                               cfg.unfreeze_image, cfg.unfreeze_adapted)
    freeze.apply(model)
    set_drop_path(model, cfg.drop_path)
    model.train(True)

    rng = np.random.default_rng(cfg.seed)
    params = model.named_parameters()
    state = AdamState()
    lrs = {"new": cfg.lr_new, "backbone": cfg.lr_backbone}

    train_ids = corpus.split_ids("train")
    if not train_ids:
        raise DataError("corpus has no training split")
    queue = []

    logs = []
    for step in range(1, cfg.steps + 1):
        while len(queue) < cfg.batch_size:
            queue.extend(rng.permutation(train_ids).tolist())
        batch_ids, queue = queue[: cfg.batch_size], queue[cfg.batch_size :]
        batch = data_mod.load_batch(corpus, batch_ids, model.cfg.frames,
                                    training=True, rng=rng)
        losses = model.compute_losses(Tensor(batch["frames"]), batch["captions"], rng)
        entry = {
            "step": step,
            "l_vtc": losses["vtc"].item(),
            "l_mlm": losses["mlm"].item(),
            "l_unilm": losses["unilm"].item(),
            "l_total": losses["total"].item(),
        }
        if not math.isfinite(entry["l_total"]):
            _save_model_checkpoint(ckpt_path, model, cfg.stage, config_text)
            _write_metrics(metrics_path, logs)
            raise NumericError(
                f"loss diverged at step {step}; last good checkpoint at {ckpt_path}"
            )
        model.zero_grad()
        losses["total"].backward()
        adam_step(params, freeze.trainable, lrs, state, cfg.grad_clip)
        model.temperature.data = np.clip(model.temperature.data, TAU_MIN, TAU_MAX)
        logs.append(entry)

    model.train(False)
    _save_model_checkpoint(ckpt_path, model, cfg.stage, config_text)
    _write_metrics(metrics_path, logs)
    return logs


def _save_model_checkpoint(path, model, stage: str, config_text: str) -> None:
    arrays = dict(model.state_arrays())
    arrays["_meta.stage"] = np.array([STAGES.index(resolve_stage(stage))], dtype=np.float32)
    if config_text:
        arrays["_meta.config"] = encode_meta_text(config_text)
    save_checkpoint(path, arrays)


def _write_metrics(path, logs) -> None:
    if path is None:
        return
    with open(path, "w") as f:
        for entry in logs:
            f.write(json.dumps(entry) + "\n")
