"""Multi-level decoder with encoder skips, fusion stitching, and the loss.

The decoder mirrors the encoder stages 5 -> 1 with shared weights across the
five views, adding the matching encoder feature residually at each level.
Stage-1 outputs are the penultimate features: the global one (P_t) feeds the
fusion weighting and the memory hand-off, the locals are stitched against it
per patch before the prediction head.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import FeaturePyramid
from .msim import MsimOutput
from .views import stitch_fused

NUM_CLASSES = 3  # background, Glisson sheath, hepatic vein


class DecoderConfigError(ValueError):
    """Raised on stage shape mismatches."""


@dataclass
class DecoderPyramid:
    """Per-view decoded features per level plus the penultimate tensors."""

    locals_: list[list[torch.Tensor]]  # [view][level index, deepest first]
    globals_: list[torch.Tensor]
    penultimate_locals: list[torch.Tensor]
    penultimate_global: torch.Tensor  # P_t


@dataclass
class Prediction:
    logits: torch.Tensor  # (1 + vessel classes) x H x W

    @property
    def mask(self) -> torch.Tensor:
        return self.logits.argmax(dim=0)

    def probabilities(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=0)


class UpStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int) -> None:
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.GroupNorm(min(8, out_ch), out_ch),
            nn.GELU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.GELU(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv(x)


class MultiViewDecoder(nn.Module):
    def __init__(self, stage_channels: tuple[int, ...] = (16, 32, 64, 128, 256)) -> None:
        super().__init__()
        if len(stage_channels) != 5:
            raise DecoderConfigError("decoder mirrors exactly 5 encoder stages")
        self.stage_channels = stage_channels
        self.up = nn.ModuleList(
            UpStage(stage_channels[i + 1], stage_channels[i]) for i in range(4)
        )
        c1 = stage_channels[0]
        self.head = nn.Sequential(
            nn.Conv2d(c1, c1, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(c1, NUM_CLASSES, 1),
        )

    def forward(self, pyramid: FeaturePyramid, msim_out: MsimOutput) -> DecoderPyramid:
        """Decode all views from the interaction outputs with encoder skips."""
        entry = torch.stack([*msim_out.locals_updated, msim_out.global_updated], dim=0)
        levels = [entry]
        x = entry
        for i in range(4, 0, -1):  # producing stage i from stage i+1
            skip_locals, skip_global = pyramid.stage(i)
            skip = torch.stack([*skip_locals, skip_global], dim=0)
            x = self.up[i - 1](x)
            if x.shape != skip.shape:
                raise DecoderConfigError(
                    f"decoder stage {i} shape {tuple(x.shape)} != skip {tuple(skip.shape)}"
                )
            x = x + skip
            levels.append(x)
        locals_ = [[lvl[m] for lvl in levels] for m in range(4)]
        globals_ = [lvl[4] for lvl in levels]
        return DecoderPyramid(
            locals_=locals_,
            globals_=globals_,
            penultimate_locals=[levels[-1][m] for m in range(4)],
            penultimate_global=levels[-1][4],
        )

    def predict(self, decoded: DecoderPyramid, weights: torch.Tensor) -> Prediction:
        """Stitch penultimate views with the fusion weights and emit logits.

        Output logits are bilinearly upsampled to the full frame resolution
        (4x the penultimate side: 2x from stitching, 2x from the stage-1
        stride).
        """
        if weights is None:
            raise DecoderConfigError("fusion weights required for prediction")
        fused = stitch_fused(decoded.penultimate_locals, decoded.penultimate_global, weights)
        logits = self.head(fused.unsqueeze(0))
        logits = F.interpolate(logits, scale_factor=2, mode="bilinear", align_corners=False)
        return Prediction(logits=logits.squeeze(0))


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy plus soft Dice, equal weights.

    ``logits`` is C x H x W, ``target`` an integer H x W label map.
    """
    ce = F.cross_entropy(logits.unsqueeze(0), target.unsqueeze(0))
    probs = torch.softmax(logits, dim=0)
    one_hot = F.one_hot(target, num_classes=logits.shape[0]).permute(2, 0, 1).to(probs.dtype)
    inter = (probs * one_hot).sum(dim=(1, 2))
    total = probs.sum(dim=(1, 2)) + one_hot.sum(dim=(1, 2))
    dice_per_class = (2.0 * inter + 1.0) / (total + 1.0)
    return ce + (1.0 - dice_per_class.mean())
