"""Five-stage hierarchical encoder shared across all five views.

Each stage halves the spatial resolution; the two deepest stages add a light
self-attention block on top of the convolutions. Residual prior maps are
injected after every stage through zero-initialized 1x1 projections, so the
prior branch starts silent and the pyramid equals the plain encoder output
until training opens the gates.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .memory import MemoryBank
from .views import ViewSet

DEFAULT_STAGE_CHANNELS = (16, 32, 64, 128, 256)


class EncoderConfigError(ValueError):
    """Raised on stage/prior shape mismatches."""


@dataclass
class StageConfig:
    channels: tuple[int, ...] = DEFAULT_STAGE_CHANNELS
    in_channels: int = 3
    attention_stages: tuple[int, ...] = (4, 5)
    attention_heads: int = 4

    def __post_init__(self) -> None:
        if len(self.channels) != 5:
            raise EncoderConfigError("encoder uses exactly 5 stages")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise EncoderConfigError("stage channels must be non-decreasing")


@dataclass
class FeaturePyramid:
    """Per-view, per-stage features; stage i spatial is (view side) / 2^i.

    ``locals_`` is indexed [view m][stage i-1]; ``globals_`` is [stage i-1].
    ``prior_injected`` records whether residual priors were added.
    """

    locals_: list[list[torch.Tensor]]
    globals_: list[torch.Tensor]
    prior_injected: bool
    frame_index: int = 0

    def stage(self, i: int) -> tuple[list[torch.Tensor], torch.Tensor]:
        return [view[i - 1] for view in self.locals_], self.globals_[i - 1]


class SpatialSelfAttention(nn.Module):
    """Single pre-norm self-attention over the flattened feature map."""

    def __init__(self, channels: int, heads: int) -> None:
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).transpose(1, 2)
        normed = self.norm(tokens)
        out, _ = self.attn(normed, normed, normed, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class EncoderStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, with_attention: bool, heads: int) -> None:
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1),
            nn.GroupNorm(min(8, out_ch), out_ch),
            nn.GELU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.GELU(),
        )
        self.attn = SpatialSelfAttention(out_ch, heads) if with_attention else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv(x)
        if self.attn is not None:
            x = self.attn(x)
        return x


class MultiViewEncoder(nn.Module):
    """Shared-weight pyramid encoder with per-stage residual prior injection."""

    def __init__(self, config: StageConfig | None = None) -> None:
        super().__init__()
        self.config = config or StageConfig()
        chans = self.config.channels
        ins = (self.config.in_channels, *chans[:-1])
        self.stages = nn.ModuleList(
            EncoderStage(
                ins[i],
                chans[i],
                with_attention=(i + 1) in self.config.attention_stages,
                heads=self.config.attention_heads,
            )
            for i in range(5)
        )
        # zero-initialized bias-free gates for the residual priors, one per
        # stage; bias-free keeps "zero priors" and "no priors" bit-equivalent
        self.prior_gate = nn.ModuleList(nn.Conv2d(c, c, 1, bias=False) for c in chans)
        for gate in self.prior_gate:
            nn.init.zeros_(gate.weight)

    def encode_views(
        self,
        views: ViewSet,
        priors: list[list[torch.Tensor]] | None = None,
        prior_stage_mask: tuple[bool, ...] = (True,) * 5,
        frame_index: int = 0,
    ) -> FeaturePyramid:
        """Encode the 4 locals and the global view with shared weights.

        ``priors`` is indexed [view m][stage i-1] and must match each stage's
        spatial/channel shape; ``None`` (or all-zero maps) yields the plain
        pyramid. ``prior_stage_mask`` can silence individual injection sites.
        """
        all_views = views.all_views()
        x = torch.stack(all_views, dim=0)
        if priors is not None and len(priors) != len(all_views):
            raise EncoderConfigError(
                f"expected priors for {len(all_views)} views, got {len(priors)}"
            )
        per_stage: list[torch.Tensor] = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if priors is not None and prior_stage_mask[i]:
                expected = x.shape[1:]
                for m, p in enumerate(priors):
                    if p[i].shape != expected:
                        raise EncoderConfigError(
                            f"stage {i + 1} prior for view {m} has shape "
                            f"{tuple(p[i].shape)}, expected {tuple(expected)}"
                        )
                prior_i = torch.stack([p[i] for p in priors], dim=0)
                x = x + self.prior_gate[i](prior_i)
            per_stage.append(x)
        locals_ = [[per_stage[i][m] for i in range(5)] for m in range(4)]
        globals_ = [per_stage[i][4] for i in range(5)]
        return FeaturePyramid(
            locals_=locals_,
            globals_=globals_,
            prior_injected=priors is not None,
            frame_index=frame_index,
        )


def store_current_global(
    pyramid: FeaturePyramid,
    bank: MemoryBank,
    decoder_global: torch.Tensor | None = None,
) -> None:
    """Push the frame's global features (all stages) into the memory bank."""
    features = {i + 1: pyramid.globals_[i] for i in range(5)}
    bank.push(features, pyramid.frame_index, decoder_global=decoder_global)
