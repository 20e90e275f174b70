"""Multi-view geometry: partition identities, patch round trips, blending."""

import pytest
import torch

from hrvvs.views import (
    FullFrame,
    GeometryError,
    decompose,
    merge_patches,
    paste_quadrants,
    patch_weight_map,
    split_patches,
    stitch_fused,
)


class TestDecompose:
    def test_constant_quadrants(self):
        frame = torch.zeros(3, 4, 4)
        frame[:, :2, :2] = 1.0
        frame[:, :2, 2:] = 2.0
        frame[:, 2:, :2] = 3.0
        frame[:, 2:, 2:] = 4.0
        vs = decompose(frame)
        for value, local in zip((1.0, 2.0, 3.0, 4.0), vs.locals):
            assert local.shape == (3, 2, 2)
            assert torch.equal(local, torch.full((3, 2, 2), value))

    def test_partition_round_trip_exact(self):
        frame = torch.rand(3, 64, 128)
        vs = decompose(frame)
        assert torch.equal(paste_quadrants(vs.locals), frame)

    def test_global_preserves_constants(self):
        frame = torch.full((2, 8, 8), 0.731)
        vs = decompose(frame)
        assert torch.allclose(vs.global_view, torch.full((2, 4, 4), 0.731), atol=1e-7)

    def test_odd_dims_rejected(self):
        with pytest.raises(GeometryError):
            decompose(torch.rand(3, 5, 4))

    def test_full_frame_validates_stride(self):
        with pytest.raises(GeometryError):
            FullFrame(torch.rand(3, 60, 64))
        FullFrame(torch.rand(3, 64, 64))  # valid


class TestPatches:
    def test_shapes_8x8(self):
        patches = split_patches(torch.rand(1, 8, 8))
        assert len(patches) == 16
        assert all(p.shape == (1, 2, 2) for p in patches)

    def test_first_patch_is_top_left_corner(self):
        local = torch.rand(2, 16, 12)
        patches = split_patches(local)
        assert torch.equal(patches[0], local[:, :4, :3])

    def test_round_trip_exact(self):
        local = torch.rand(3, 32, 32)
        assert torch.equal(merge_patches(split_patches(local)), local)

    def test_indivisible_rejected(self):
        with pytest.raises(GeometryError):
            split_patches(torch.rand(1, 6, 8))


class TestStitch:
    def test_all_ones_reproduces_locals(self):
        frame = torch.rand(3, 64, 64)
        vs = decompose(frame)
        out = stitch_fused(vs.locals, torch.rand(3, 32, 32), torch.ones(4, 16))
        assert torch.equal(out, frame)

    def test_all_zeros_gives_upsampled_global(self):
        import torch.nn.functional as F

        locals_ = [torch.rand(3, 32, 32) for _ in range(4)]
        global_view = torch.rand(3, 32, 32)
        out = stitch_fused(locals_, global_view, torch.zeros(4, 16))
        expected = F.interpolate(
            global_view.unsqueeze(0), size=(64, 64), mode="bilinear", align_corners=False
        ).squeeze(0)
        assert torch.equal(out, expected)

    def test_half_weight_blends(self):
        locals_ = [torch.full((1, 8, 8), 2.0) for _ in range(4)]
        global_view = torch.zeros(1, 8, 8)
        weights = torch.zeros(4, 16)
        weights[1, 5] = 0.5
        out = stitch_fused(locals_, global_view, weights)
        # quadrant 1 (top-right), patch 5 = grid row 1, col 1 within the quadrant
        patch = out[:, 2:4, 10:12]
        assert torch.allclose(patch, torch.ones(1, 2, 2))

    def test_convexity_bound(self):
        import torch.nn.functional as F

        gen = torch.Generator().manual_seed(7)
        for _ in range(50):
            locals_ = [torch.rand(2, 16, 16, generator=gen) for _ in range(4)]
            global_view = torch.rand(2, 16, 16, generator=gen)
            weights = torch.rand(4, 16, generator=gen)
            out = stitch_fused(locals_, global_view, weights)
            up = F.interpolate(
                global_view.unsqueeze(0), size=(32, 32), mode="bilinear", align_corners=False
            ).squeeze(0)
            pasted = paste_quadrants(locals_)
            lo = torch.minimum(pasted, up)
            hi = torch.maximum(pasted, up)
            assert bool((out >= lo - 1e-6).all()) and bool((out <= hi + 1e-6).all())

    def test_weight_out_of_range_rejected(self):
        locals_ = [torch.rand(1, 8, 8) for _ in range(4)]
        with pytest.raises(GeometryError):
            stitch_fused(locals_, torch.rand(1, 8, 8), torch.full((4, 16), 1.5))


def test_patch_weight_map_layout():
    weights = torch.arange(16, dtype=torch.float32)
    wmap = patch_weight_map(weights, (8, 8))
    assert wmap.shape == (8, 8)
    assert wmap[0, 0] == 0 and wmap[0, 7] == 3
    assert wmap[7, 0] == 12 and wmap[7, 7] == 15
