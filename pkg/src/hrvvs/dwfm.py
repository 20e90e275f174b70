"""Dynamic per-patch fusion weights with an exponentially forgotten history.

Each of the 4x16 local patches queries a reference global feature through
cross-attention; the pooled response passes a one-unit sigmoid head to give a
scalar importance in [0, 1]. Current-global, previous-global, and historical
weight grids are convexly combined, and the history is a fixed-decay
low-pass filter over past fused grids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .attention import MultiHeadCrossAttention
from .msim import to_tokens
from .views import NUM_LOCAL_VIEWS, PATCHES_PER_VIEW

WEIGHT_GRID_SHAPE = (NUM_LOCAL_VIEWS, PATCHES_PER_VIEW)


class FusionContractError(RuntimeError):
    """Raised when a weight grid is missing or out of range."""


class FusionParams(nn.Module):
    """Simplex-constrained mixing coefficients and the fixed history decay.

    (alpha, beta, gamma) are the softmax of three learnable logits, so the
    Eq.-style convex combination stays on the simplex after every optimizer
    step. ``delta`` is a fixed hyperparameter in (0, 1).
    """

    def __init__(self, delta: float = 0.9) -> None:
        super().__init__()
        if not 0.0 < delta < 1.0:
            raise FusionContractError(f"delta must lie in (0, 1), got {delta}")
        self.logits = nn.Parameter(torch.zeros(3))
        self.register_buffer("delta", torch.tensor(float(delta)))

    def coefficients(self) -> torch.Tensor:
        """(alpha, beta, gamma) on the probability simplex."""
        return torch.softmax(self.logits, dim=0)


class PatchWeightHead(nn.Module):
    """Cross-attention from patch tokens to a reference, pooled to one scalar."""

    def __init__(
        self, dim: int, heads: int = 4, dropout: float = 0.1, max_ref_side: int = 8
    ) -> None:
        super().__init__()
        self.attn = MultiHeadCrossAttention(
            dim, heads=heads, dropout=dropout, zero_init_out=False
        )
        self.head = nn.Linear(dim, 1)
        self.max_ref_side = max_ref_side

    def forward(self, patches: list[list[torch.Tensor]], reference: torch.Tensor) -> torch.Tensor:
        """Per-patch weights in [0, 1].

        ``patches`` is the 4x16 nested list from the patch grid (each entry
        C x ph x pw); ``reference`` is the global feature C x H x W used as
        keys and values, average-pooled to at most ``max_ref_side`` per side
        to bound the attention cost. Returns a 4x16 tensor.
        """
        if reference is None:
            raise FusionContractError("patch weighting requires a reference global feature")
        if len(patches) != NUM_LOCAL_VIEWS or any(len(p) != PATCHES_PER_VIEW for p in patches):
            raise FusionContractError("expected a 4x16 patch grid")
        if max(reference.shape[-2:]) > self.max_ref_side:
            reference = nn.functional.adaptive_avg_pool2d(
                reference.unsqueeze(0),
                (
                    min(reference.shape[-2], self.max_ref_side),
                    min(reference.shape[-1], self.max_ref_side),
                ),
            ).squeeze(0)
        flat = [p for view in patches for p in view]
        q = torch.stack([to_tokens(p) for p in flat], dim=0)  # 64 x Np x C
        ref_tokens = to_tokens(reference).unsqueeze(0).expand(len(flat), -1, -1)
        attended = self.attn(q, ref_tokens)
        pooled = attended.mean(dim=1)
        scores = torch.sigmoid(self.head(pooled)).squeeze(-1)
        return scores.reshape(WEIGHT_GRID_SHAPE)


def _check_grid(grid: torch.Tensor, name: str) -> torch.Tensor:
    if grid is None:
        raise FusionContractError(f"missing weight grid {name}")
    if grid.shape != WEIGHT_GRID_SHAPE:
        raise FusionContractError(f"{name} must be {WEIGHT_GRID_SHAPE}, got {tuple(grid.shape)}")
    if bool((grid < 0).any()) or bool((grid > 1).any()):
        raise FusionContractError(f"{name} entries must lie in [0, 1]")
    return grid


def fuse_weights(
    w_local: torch.Tensor | None,
    w_global: torch.Tensor,
    w_history: torch.Tensor | None,
    t: int,
    params: FusionParams,
) -> torch.Tensor:
    """Convex combination of the three weight grids; frame 0 uses only W_g."""
    w_global = _check_grid(w_global, "W_g")
    if t == 0:
        return w_global
    w_local = _check_grid(w_local, "W_l")
    w_history = _check_grid(w_history, "W_h")
    alpha, beta, gamma = params.coefficients().unbind(0)
    return alpha * w_local + beta * w_global + gamma * w_history


def update_history(
    w_history: torch.Tensor, w_final: torch.Tensor, delta: float | torch.Tensor
) -> torch.Tensor:
    """Exponential history update ``delta * W_h + (1 - delta) * W_final``."""
    delta_value = float(delta)
    if not 0.0 < delta_value < 1.0:
        raise FusionContractError(f"delta must lie in (0, 1), got {delta_value}")
    w_history = _check_grid(w_history, "W_h")
    w_final = _check_grid(w_final, "W_final")
    return delta * w_history + (1.0 - delta) * w_final


@dataclass
class WeightState:
    """Per-video fusion weight state, strictly sequential in t."""

    w_history: torch.Tensor | None = None
    w_final: torch.Tensor | None = None
    t: int = 0

    def reset(self) -> None:
        self.w_history = None
        self.w_final = None
        self.t = 0


class DynamicWeightFusion(nn.Module):
    """Stateful driver tying patch scoring, fusion, and history together."""

    def __init__(self, dim: int, heads: int = 4, dropout: float = 0.1, delta: float = 0.9) -> None:
        super().__init__()
        self.patch_head = PatchWeightHead(dim, heads=heads, dropout=dropout)
        self.params = FusionParams(delta=delta)

    def step(
        self,
        patches: list[list[torch.Tensor]],
        current_global: torch.Tensor,
        previous_global: torch.Tensor | None,
        state: WeightState,
    ) -> torch.Tensor:
        """Compute W_final for the current frame and advance the state.

        At t=0 only the current-global weights are computed and stored as the
        next frame's history; afterwards Eq.-style fusion and the exponential
        history update run in order.
        """
        w_global = self.patch_head(patches, current_global)
        if state.t == 0:
            w_final = w_global
            state.w_history = w_global
        else:
            if previous_global is None:
                raise FusionContractError("previous global feature required for t > 0")
            w_local = self.patch_head(patches, previous_global)
            w_final = fuse_weights(w_local, w_global, state.w_history, state.t, self.params)
            state.w_history = update_history(state.w_history, w_final, self.params.delta)
        state.w_final = w_final
        state.t += 1
        return w_final
