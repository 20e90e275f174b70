"""Multi-view geometry: quadrant decomposition, patch grids, weighted stitching.

A full frame is split into four local quadrant views plus one downsampled
global view; each local view is further tiled into a 4x4 grid of patches for
per-patch fusion weighting. All operations here are pure tensor geometry with
exact partition/round-trip guarantees.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

NUM_LOCAL_VIEWS = 4
PATCH_GRID = 4  # patches per side within one local view
PATCHES_PER_VIEW = PATCH_GRID * PATCH_GRID


class GeometryError(ValueError):
    """Raised when tensor dimensions violate the multi-view contracts."""


@dataclass
class FullFrame:
    """A single frame (pixels or feature activations) with its temporal index.

    Height and width must each be divisible by 64 so that five stride-2
    encoder stages applied after the quadrant split land on integer sizes.
    """

    data: torch.Tensor  # C x H x W
    frame_index: int = 0

    def __post_init__(self) -> None:
        if self.data.dim() != 3:
            raise GeometryError(f"frame must be CxHxW, got shape {tuple(self.data.shape)}")
        _, h, w = self.data.shape
        if h % 64 != 0 or w % 64 != 0:
            raise GeometryError(f"frame sides must be divisible by 64, got {h}x{w}")
        if self.frame_index < 0:
            raise GeometryError("frame_index must be nonnegative")


@dataclass
class ViewSet:
    """Four quadrant views (TL, TR, BL, BR order) plus one global view.

    All five tensors share the shape C x h x w with (h, w) = (H/2, W/2).
    """

    locals: list[torch.Tensor]
    global_view: torch.Tensor

    def all_views(self) -> list[torch.Tensor]:
        return [*self.locals, self.global_view]


def decompose(frame: FullFrame | torch.Tensor) -> ViewSet:
    """Split a frame into its four exact quadrants and a bilinear half-size global view."""
    data = frame.data if isinstance(frame, FullFrame) else frame
    if data.dim() != 3:
        raise GeometryError(f"expected CxHxW tensor, got shape {tuple(data.shape)}")
    _, hh, ww = data.shape
    if hh % 2 != 0 or ww % 2 != 0:
        raise GeometryError(f"frame sides must be even to quarter, got {hh}x{ww}")
    h, w = hh // 2, ww // 2
    quads = [
        data[:, :h, :w],
        data[:, :h, w:],
        data[:, h:, :w],
        data[:, h:, w:],
    ]
    global_view = F.interpolate(
        data.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False
    ).squeeze(0)
    return ViewSet(locals=[q.contiguous() for q in quads], global_view=global_view)


def paste_quadrants(locals_: list[torch.Tensor]) -> torch.Tensor:
    """Reassemble four quadrant tensors (TL, TR, BL, BR) into one full tensor."""
    if len(locals_) != NUM_LOCAL_VIEWS:
        raise GeometryError(f"expected {NUM_LOCAL_VIEWS} quadrants, got {len(locals_)}")
    top = torch.cat([locals_[0], locals_[1]], dim=-1)
    bottom = torch.cat([locals_[2], locals_[3]], dim=-1)
    return torch.cat([top, bottom], dim=-2)


def split_patches(local: torch.Tensor, grid: int = PATCH_GRID) -> list[torch.Tensor]:
    """Tile one local view into grid x grid non-overlapping patches, row-major."""
    if local.dim() != 3:
        raise GeometryError(f"expected CxhxW tensor, got shape {tuple(local.shape)}")
    _, h, w = local.shape
    if h % grid != 0 or w % grid != 0:
        raise GeometryError(f"view sides must be divisible by {grid}, got {h}x{w}")
    ph, pw = h // grid, w // grid
    patches = []
    for r in range(grid):
        for c in range(grid):
            patches.append(local[:, r * ph : (r + 1) * ph, c * pw : (c + 1) * pw])
    return patches


def merge_patches(patches: list[torch.Tensor], grid: int = PATCH_GRID) -> torch.Tensor:
    """Inverse of :func:`split_patches`; exact reassembly in row-major grid order."""
    if len(patches) != grid * grid:
        raise GeometryError(f"expected {grid * grid} patches, got {len(patches)}")
    rows = [torch.cat(patches[r * grid : (r + 1) * grid], dim=-1) for r in range(grid)]
    return torch.cat(rows, dim=-2)


def patch_weight_map(weights: torch.Tensor, view_hw: tuple[int, int]) -> torch.Tensor:
    """Expand a 16-entry per-patch weight vector into a dense h x w pixel map."""
    grid = PATCH_GRID
    if weights.numel() != grid * grid:
        raise GeometryError(f"expected {grid * grid} patch weights, got {weights.numel()}")
    h, w = view_hw
    if h % grid != 0 or w % grid != 0:
        raise GeometryError(f"view sides must be divisible by {grid}, got {h}x{w}")
    grid_map = weights.reshape(grid, grid)
    return grid_map.repeat_interleave(h // grid, dim=0).repeat_interleave(w // grid, dim=1)


def stitch_fused(
    locals_: list[torch.Tensor],
    global_view: torch.Tensor,
    weights: torch.Tensor,
) -> torch.Tensor:
    """Blend local quadrants against the upsampled global view, per patch.

    ``weights`` is a 4x16 grid of scalars in [0, 1]; the output pixel inside
    patch p of quadrant m is ``w[m, p] * local + (1 - w[m, p]) * global_up``.
    Weight 1 everywhere reproduces the pasted locals exactly.
    """
    if len(locals_) != NUM_LOCAL_VIEWS:
        raise GeometryError(f"expected {NUM_LOCAL_VIEWS} local views, got {len(locals_)}")
    if weights.shape != (NUM_LOCAL_VIEWS, PATCHES_PER_VIEW):
        raise GeometryError(
            f"weights must be {NUM_LOCAL_VIEWS}x{PATCHES_PER_VIEW}, got {tuple(weights.shape)}"
        )
    if bool((weights < 0).any()) or bool((weights > 1).any()):
        raise GeometryError("fusion weights must lie in [0, 1]")
    _, h, w = locals_[0].shape
    for m, loc in enumerate(locals_):
        if loc.shape != locals_[0].shape:
            raise GeometryError(f"local view {m} shape mismatch")
    if global_view.shape != locals_[0].shape:
        raise GeometryError("global view must match local view shape")

    global_up = F.interpolate(
        global_view.unsqueeze(0), size=(2 * h, 2 * w), mode="bilinear", align_corners=False
    ).squeeze(0)
    global_quads = [
        global_up[:, :h, :w],
        global_up[:, :h, w:],
        global_up[:, h:, :w],
        global_up[:, h:, w:],
    ]

    weights = weights.to(dtype=locals_[0].dtype)
    fused = []
    for m in range(NUM_LOCAL_VIEWS):
        wmap = patch_weight_map(weights[m], (h, w))
        fused.append(wmap * locals_[m] + (1.0 - wmap) * global_quads[m])
    return paste_quadrants(fused)
