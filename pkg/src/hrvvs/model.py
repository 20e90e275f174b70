"""End-to-end network: prior branch, multi-view encoder, memory decoder.

One frame is processed at a time; video-level state (memory bank, fusion
weight history, frame counter) is threaded explicitly so training windows
and streaming evaluation share the same code path. The three ablation flags
degrade cleanly: no priors, identity interaction, all-ones fusion weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .config import RunConfig
from .decoder import MultiViewDecoder, Prediction, segmentation_loss
from .dwfm import DynamicWeightFusion, WeightState
from .encoder import MultiViewEncoder, StageConfig, store_current_global
from .memory import MemoryBank
from .msim import Msim, MsimOutput
from .toyvar import ToyVar, ToyVarConfig
from .views import NUM_LOCAL_VIEWS, PATCHES_PER_VIEW, decompose, split_patches


@dataclass
class VideoState:
    """Mutable per-video context; create fresh at every video boundary."""

    memory: MemoryBank
    weights: WeightState = field(default_factory=WeightState)
    t: int = 0

    def reset(self) -> None:
        self.memory.reset()
        self.weights.reset()
        self.t = 0


@dataclass
class FrameResult:
    prediction: Prediction
    fusion_weights: torch.Tensor
    penultimate_global: torch.Tensor


class HrvvsNet(nn.Module):
    """High-resolution video vasculature segmentation network."""

    def __init__(self, config: RunConfig | None = None) -> None:
        super().__init__()
        self.config = config or RunConfig()
        chans = self.config.stage_channels
        self.prior = ToyVar(
            ToyVarConfig(
                codebook_size=self.config.codebook_size,
                codebook_dim=self.config.codebook_dim,
                hidden_channels=self.config.var_hidden_channels,
                embed_dim=self.config.var_embed_dim,
                depth=self.config.var_depth,
                stage_channels=chans,
            )
        )
        self.encoder = MultiViewEncoder(
            StageConfig(channels=chans, attention_heads=self.config.heads)
        )
        mem_token_dim = chans[max(self.config.mem_stages) - 1] + self.config.mem_pe_dim
        self.msim = Msim(
            dim=chans[-1],
            memory_token_dim=mem_token_dim,
            heads=self.config.heads,
            dropout=self.config.dropout,
        )
        self.decoder = MultiViewDecoder(chans)
        self.dwfm = DynamicWeightFusion(
            dim=chans[0],
            heads=self.config.heads,
            dropout=self.config.dropout,
            delta=self.config.delta,
        )

    @property
    def use_var(self) -> bool:
        return not self.config.no_var

    @property
    def use_msim(self) -> bool:
        return not self.config.no_msim

    @property
    def use_dwfm(self) -> bool:
        return not self.config.no_dwfm

    def new_video_state(self) -> VideoState:
        return VideoState(
            memory=MemoryBank(
                capacity=self.config.mem_capacity,
                max_age_exp=self.config.mem_max_age_exp,
                stages=self.config.mem_stages,
                pe_dim=self.config.mem_pe_dim,
            )
        )

    def trainable_parameters(self) -> list[nn.Parameter]:
        """Everything except the frozen prior backbone (its adapters stay live)."""
        frozen = {id(p) for p in self.prior.backbone_parameters()}
        return [p for p in self.parameters() if id(p) not in frozen]

    def process_frame(self, frame: torch.Tensor, state: VideoState) -> FrameResult:
        """Segment one frame and advance the per-video state.

        ``frame`` is 3 x H x W in [0, 1] with sides divisible by 64. Frames
        must be fed in temporal order; the memory push happens after the
        interaction module has consumed the tokens of the preceding frames.
        """
        views = decompose(frame)
        priors = None
        if self.use_var:
            priors = self.prior.extract_priors_batch(views.all_views())
        pyramid = self.encoder.encode_views(views, priors, frame_index=state.t)

        locals5, global5 = pyramid.stage(5)
        if self.use_msim:
            msim_out = self.msim(global5, locals5, state.memory.tokens())
        else:
            msim_out = MsimOutput(
                global_history=global5, global_updated=global5, locals_updated=locals5
            )
        decoded = self.decoder(pyramid, msim_out)

        if self.use_dwfm:
            patches = [split_patches(loc) for loc in decoded.penultimate_locals]
            w_final = self.dwfm.step(
                patches,
                decoded.penultimate_global,
                state.memory.previous_global(),
                state.weights,
            )
        else:
            w_final = torch.ones(
                NUM_LOCAL_VIEWS, PATCHES_PER_VIEW, dtype=frame.dtype, device=frame.device
            )
        prediction = self.decoder.predict(decoded, w_final)

        store_current_global(pyramid, state.memory, decoder_global=decoded.penultimate_global)
        state.t += 1
        return FrameResult(
            prediction=prediction,
            fusion_weights=w_final,
            penultimate_global=decoded.penultimate_global,
        )

    def window_loss(self, frames: list[torch.Tensor], targets: list[torch.Tensor]) -> torch.Tensor:
        """Mean segmentation loss over one consecutive-frame window.

        The window starts with fresh state; frames are processed strictly in
        order so the memory bank and weight history stay causal.
        """
        state = self.new_video_state()
        losses = []
        for frame, target in zip(frames, targets):
            result = self.process_frame(frame, state)
            losses.append(segmentation_loss(result.prediction.logits, target))
        return torch.stack(losses).mean()

    @torch.no_grad()
    def segment_video(self, frames: list[torch.Tensor]) -> list[Prediction]:
        """Streaming inference over a whole video with one state thread."""
        was_training = self.training
        self.eval()
        state = self.new_video_state()
        out = [self.process_frame(f, state).prediction for f in frames]
        if was_training:
            self.train()
        return out
