"""Patch-based vision transformer with an insertable video adapter.

Frames are encoded independently by the backbone (attention runs over
patch tokens within each frame); the adapter is the only pathway that
mixes information across frames. Features flow as (B, T, N, d) with the
[CLS] token at index 0 along N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nn
from .diffcore import Tensor
from .errors import ConfigError, ShapeError


@dataclass
class VisualFeatures:
    """Per-layer visual features: values (B, T, N, d), N = patches + [CLS]."""

    values: Tensor
    grid: tuple

    @property
    def n_tokens(self):
        return self.values.shape[2]

    def cls(self) -> Tensor:
        return self.values[:, :, 0, :]

    def patches(self) -> Tensor:
        return self.values[:, :, 1:, :]

    def flat_tokens(self) -> Tensor:
        """All tokens of all frames as one memory sequence (B, T*N, d)."""
        b, t, n, d = self.values.shape
        return dc.reshape(self.values, (b, t * n, d))


class PatchEmbed(nn.Module):
    """Shared per-frame stem: patch projection, learned [CLS], learned
    positional embeddings. Identical frames embed identically."""

    def __init__(self, image_size: int, patch_size: int, channels: int, width: int, rng):
        if image_size % patch_size:
            raise ShapeError(f"image size {image_size} not divisible by patch {patch_size}")
        self.patch_size = patch_size
        side = image_size // patch_size
        self.grid = (side, side)
        n_tokens = side * side + 1
        self.proj = nn.Linear(channels * patch_size * patch_size, width, rng)
        self.cls_token = nn.param(rng, (width,))
        self.pos = nn.param(rng, (n_tokens, width))

    def __call__(self, frames: Tensor) -> VisualFeatures:
        b, t, c, h, w = frames.shape
        p = self.patch_size
        if h % p or w % p:
            raise ShapeError(f"frame {h}x{w} not divisible by patch {p}")
        hp, wp = h // p, w // p
        x = dc.reshape(frames, (b, t, c, hp, p, wp, p))
        x = dc.transpose(x, (0, 1, 3, 5, 2, 4, 6))
        x = dc.reshape(x, (b, t, hp * wp, c * p * p))
        x = self.proj(x)
        cls = Tensor(np.zeros((b, t, 1, x.shape[-1]))) + dc.reshape(
            self.cls_token, (1, 1, 1, -1)
        )
        x = dc.concat([cls, x], axis=2)
        return VisualFeatures(x + self.pos, (hp, wp))


def dynamic_conv(kernels: Tensor, patches: Tensor, grid: tuple, kernel_size: int = 3) -> Tensor:
    """Depthwise 2-D convolution with per-sample generated kernels.

    ``patches``: (..., N_p, c) laid out row-major on ``grid``;
    ``kernels``: (..., k*k, c), one k x k kernel per channel. Zero
    padding, stride 1, shape preserved.
    """
    rows, cols = grid
    if patches.shape[-2] != rows * cols:
        raise ShapeError(f"{patches.shape[-2]} patches do not fill grid {grid}")
    if kernels.shape[-2] != kernel_size * kernel_size:
        raise ShapeError(f"kernels {kernels.shape} do not match size {kernel_size}")
    lead = patches.shape[:-2]
    c = patches.shape[-1]
    flat = int(np.prod(lead)) if lead else 1
    pg = dc.reshape(patches, (flat, rows, cols, c))
    kf = dc.reshape(kernels, (flat, kernel_size * kernel_size, c))

    pad = kernel_size // 2
    zrow = Tensor(np.zeros((flat, pad, cols, c)))
    pg = dc.concat([zrow, pg, zrow], axis=1)
    zcol = Tensor(np.zeros((flat, rows + 2 * pad, pad, c)))
    pg = dc.concat([zcol, pg, zcol], axis=2)

    out = None
    for di in range(kernel_size):
        for dj in range(kernel_size):
            window = pg[:, di : di + rows, dj : dj + cols, :]
            weight = dc.reshape(kf[:, di * kernel_size + dj, :], (flat, 1, 1, c))
            term = window * weight
            out = term if out is None else out + term
    return dc.reshape(out, lead + (rows * cols, c))


class VideoAdapter(nn.Module):
    """Bottleneck module adding temporal context to one backbone layer.

    [CLS] track: down-project, temporal transformer over the T frame
    positions (with learned temporal position embeddings), zero-init
    up-projection. Patch track: down-project, depthwise convolution
    under kernels generated from the temporal [CLS] feature, zero-init
    up-projection. Both deltas are added residually by default, so a
    fresh adapter is an exact identity.
    """

    def __init__(self, width: int, bottleneck: int, heads: int, grid: tuple, rng,
                 max_frames: int = 8, kernel_size: int = 3, residual: bool = True):
        self.grid = grid
        self.kernel_size = kernel_size
        self.residual = residual
        self.fc1 = nn.Linear(width, bottleneck, rng)
        self.temporal_pos = nn.param(rng, (max_frames, bottleneck))
        self.tt = nn.TransformerBlock(bottleneck, heads, rng)
        self.fc2 = nn.Linear(bottleneck, width, rng, zero_init=True)
        self.fc3 = nn.Linear(width, bottleneck, rng)
        self.kernel_gen = nn.Linear(bottleneck, kernel_size * kernel_size * bottleneck, rng)
        self.fc4 = nn.Linear(bottleneck, width, rng, zero_init=True)

    def temporal_context(self, v_cls: Tensor, rng=None) -> Tensor:
        """Bottleneck [CLS] track after the temporal transformer: (B, T, c)."""
        t = v_cls.shape[1]
        if t > self.temporal_pos.shape[0]:
            raise ConfigError(
                f"{t} frames exceed adapter capacity {self.temporal_pos.shape[0]}"
            )
        h = self.fc1(v_cls) + self.temporal_pos[:t]
        return self.tt(h, None, rng)

    def aggregate_cls(self, v_cls: Tensor, rng=None) -> Tensor:
        """Temporal aggregation of the [CLS] track: FC2(TT(FC1(v))), (B, T, d)."""
        return self.fc2(self.temporal_context(v_cls, rng))

    def __call__(self, feats: VisualFeatures, rng=None) -> VisualFeatures:
        values = feats.values
        b, t, n, d = values.shape
        context = self.temporal_context(values[:, :, 0, :], rng)
        delta_cls = dc.reshape(self.fc2(context), (b, t, 1, d))

        kernels = dc.reshape(
            self.kernel_gen(context),
            (b, t, self.kernel_size * self.kernel_size, -1),
        )
        reduced = self.fc3(values[:, :, 1:, :])
        conv = dynamic_conv(kernels, reduced, feats.grid, self.kernel_size)
        delta_patch = self.fc4(conv)

        delta = dc.concat([delta_cls, delta_patch], axis=2)
        out = values + delta if self.residual else delta
        return VisualFeatures(out, feats.grid)


class VisionEncoder(nn.Module):
    """ViT over frames, adapters inserted after chosen blocks, pooled
    video embedding for contrastive alignment.

    The pooled embedding is the joint-space projection of the mean over
    frames of the final [CLS] features, L2-normalized; mean pooling is
    permutation-invariant, so adapters are the only temporal pathway.
    """

    def __init__(self, image_size: int, patch_size: int, channels: int, width: int,
                 heads: int, depth: int, joint_dim: int, rng,
                 adapter_layers=(), adapter_width: int = 8, max_frames: int = 8,
                 adapter_kernel: int = 3, adapter_residual: bool = True,
                 ffn_ratio: int = 4, drop_path: float = 0.0):
        for i in adapter_layers:
            if not 0 <= i < depth:
                raise ConfigError(f"adapter layer {i} outside encoder depth {depth}")
        self.embed = PatchEmbed(image_size, patch_size, channels, width, rng)
        self.blocks = [
            nn.TransformerBlock(width, heads, rng, ffn_ratio, drop_path)
            for _ in range(depth)
        ]
        self.ln_final = nn.LayerNorm(width)
        self.proj = nn.Linear(width, joint_dim, rng)
        # adapters draw from a dedicated stream so the backbone (and any
        # later consumer of rng) initializes identically with or without them
        adapter_rng = np.random.default_rng(rng.integers(2**63))
        self.adapter_at = tuple(sorted(adapter_layers))
        self.adapters = [
            VideoAdapter(width, adapter_width, heads, self.embed.grid, adapter_rng,
                         max_frames, adapter_kernel, adapter_residual)
            for _ in self.adapter_at
        ]

    def __call__(self, frames: Tensor, rng=None):
        """Encode (B, T, C, H, W) frames; returns (features, pooled).

        ``rng`` drives stochastic depth and is only needed in training
        mode with a nonzero rate.
        """
        feats = self.embed(frames)
        slot = {layer: i for i, layer in enumerate(self.adapter_at)}
        x = feats
        for i, block in enumerate(self.blocks):
            x = VisualFeatures(block(x.values, None, rng), x.grid)
            if i in slot:
                x = self.adapters[slot[i]](x, rng)
        x = VisualFeatures(self.ln_final(x.values), x.grid)
        pooled = nn.l2_normalize(self.proj(x.cls().mean(axis=1)))
        return x, pooled
