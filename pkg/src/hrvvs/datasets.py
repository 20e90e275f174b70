"""Dataset ingestion, video-level splitting, window sampling, synthetic videos.

On-disk layout: ``root/<video_id>/frames/*.png`` with matching
``root/<video_id>/masks/*.png``; masks are 8-bit palette PNGs with values
{0 background, 1 Glisson sheath, 2 hepatic vein}. The synthetic generator
renders moving curved tubes of both classes over a textured background, with
optional positional jumps, global brightness drift, and unlabeled distractor
tubes that mimic the vessel outlines.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

MASK_PALETTE = [0, 0, 0, 220, 40, 40, 40, 90, 220] + [0] * (256 * 3 - 9)
VALID_MASK_VALUES = frozenset({0, 1, 2})


class IngestionError(RuntimeError):
    """Raised on malformed dataset directories or mask files."""


@dataclass
class VideoRecord:
    video_id: str
    frame_paths: list[Path]
    mask_paths: list[Path]
    resolution: tuple[int, int]  # (height, width)

    def __len__(self) -> int:
        return len(self.frame_paths)


@dataclass
class ClipWindow:
    video_id: str
    start: int
    length: int

    @property
    def frame_range(self) -> range:
        return range(self.start, self.start + self.length)


def _check_mask_file(path: Path) -> None:
    values = np.unique(np.asarray(Image.open(path)))
    bad = set(values.tolist()) - VALID_MASK_VALUES
    if bad:
        raise IngestionError(f"mask {path} contains invalid values {sorted(bad)}")


def load_dataset(root: str | Path, validate_masks: bool = True) -> list[VideoRecord]:
    """Discover all videos under ``root``; empty root gives an empty list."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    records = []
    for video_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        frames_dir = video_dir / "frames"
        masks_dir = video_dir / "masks"
        if not frames_dir.is_dir():
            continue
        frame_paths = sorted(frames_dir.glob("*.png"))
        if not frame_paths:
            continue
        mask_paths = []
        for fp in frame_paths:
            mp = masks_dir / fp.name
            if not mp.exists():
                raise IngestionError(f"missing mask for frame {fp}")
            if validate_masks:
                _check_mask_file(mp)
            mask_paths.append(mp)
        with Image.open(frame_paths[0]) as im:
            w, h = im.size
        records.append(
            VideoRecord(
                video_id=video_dir.name,
                frame_paths=frame_paths,
                mask_paths=mask_paths,
                resolution=(h, w),
            )
        )
    return records


def split_records(
    records: list[VideoRecord], seed: int = 0, ratios: tuple[int, int, int] = (7, 1, 2)
) -> dict[str, list[VideoRecord]]:
    """Video-level 7:1:2 split, deterministic in the seed.

    Rounding rule: ``n_val = floor(n * r_val)`` and ``n_test = floor(n *
    r_test)`` with the remainder (always >= 1) going to train. Ten videos
    split exactly 7/1/2; thirty-five split 25/3/7.
    """
    if not records:
        raise IngestionError("cannot split an empty record list")
    total = sum(ratios)
    n = len(records)
    n_val = math.floor(n * ratios[1] / total)
    n_test = math.floor(n * ratios[2] / total)
    n_train = n - n_val - n_test
    if n_train < 1:
        raise IngestionError(f"split of {n} videos leaves no training video")
    order = sorted(records, key=lambda r: r.video_id)
    random.Random(seed).shuffle(order)
    return {
        "train": order[:n_train],
        "val": order[n_train : n_train + n_val],
        "test": order[n_train + n_val :],
    }


def write_split_manifest(splits: dict[str, list[VideoRecord]], path: str | Path) -> None:
    payload = {name: [r.video_id for r in recs] for name, recs in splits.items()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def sample_windows(record: VideoRecord, clip_len: int, stride: int = 1) -> list[ClipWindow]:
    """All consecutive-frame windows of ``clip_len``; empty if the video is shorter."""
    if clip_len < 1:
        raise IngestionError("clip_len must be >= 1")
    n = len(record)
    return [
        ClipWindow(video_id=record.video_id, start=s, length=clip_len)
        for s in range(0, n - clip_len + 1, stride)
    ]


# --- tensor loading ------------------------------------------------------


def load_frame_tensor(path: Path, resolution: tuple[int, int] | None = None) -> torch.Tensor:
    """3 x H x W float tensor in [0, 1], bilinearly resized to ``resolution``."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    tensor = torch.from_numpy(arr).permute(2, 0, 1)
    if resolution is not None and tensor.shape[-2:] != tuple(resolution):
        tensor = F.interpolate(
            tensor.unsqueeze(0), size=tuple(resolution), mode="bilinear", align_corners=False
        ).squeeze(0)
    return tensor


def load_mask_tensor(path: Path, resolution: tuple[int, int] | None = None) -> torch.Tensor:
    """H x W long tensor of class ids, nearest-resized to ``resolution``."""
    arr = np.asarray(Image.open(path), dtype=np.int64)
    tensor = torch.from_numpy(arr)
    if resolution is not None and tensor.shape != tuple(resolution):
        tensor = (
            F.interpolate(
                tensor.unsqueeze(0).unsqueeze(0).float(), size=tuple(resolution), mode="nearest"
            )
            .squeeze(0)
            .squeeze(0)
            .long()
        )
    return tensor


# --- synthetic generator --------------------------------------------------


@dataclass
class SynthConfig:
    seed: int = 0
    num_videos: int = 4
    frames_per_video: int = 16
    resolution: int = 128
    tube_count: int = 2  # labeled tubes, classes assigned round-robin
    distractor_count: int = 2  # unlabeled look-alike tubes
    jump_probability: float = 0.1
    jump_scale: float = 18.0
    max_step: float = 2.0  # smooth per-frame motion bound, pixels
    brightness_amplitude: float = 0.08

    def __post_init__(self) -> None:
        if self.resolution % 64 != 0:
            raise IngestionError("synthetic resolution must be divisible by 64")
        if self.tube_count < 1:
            raise IngestionError("need at least one labeled tube")


CLASS_COLORS = {
    1: np.array([0.85, 0.30, 0.25]),
    2: np.array([0.25, 0.40, 0.85]),
}
DISTRACTOR_COLOR = np.array([0.72, 0.50, 0.48])


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every pixel center to segment ab; points is [N, 2]."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def _curve_mask(control: np.ndarray, radius: float, resolution: int) -> np.ndarray:
    """Boolean raster of all pixels within ``radius`` of the polyline."""
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    pts = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    dist = np.full(pts.shape[0], np.inf)
    for a, b in zip(control[:-1], control[1:]):
        dist = np.minimum(dist, _segment_distance(pts, a, b))
    return (dist <= radius).reshape(resolution, resolution)


def _reflect(value: np.ndarray, bound: float) -> np.ndarray:
    """Reflect into [-bound, bound]; 1-Lipschitz, preserving step bounds."""
    period = 4.0 * bound
    v = np.mod(value + bound, period)
    v = np.where(v > 2.0 * bound, period - v, v)
    return v - bound


@dataclass
class _Tube:
    base: np.ndarray  # control points [K, 2]
    radius: float
    color: np.ndarray
    class_id: int  # 0 for distractors
    offset: np.ndarray
    velocity: np.ndarray


def _make_tube(rng: np.random.Generator, cfg: SynthConfig, class_id: int) -> _Tube:
    res = cfg.resolution
    margin = res * 0.22
    n_ctrl = 4
    start = rng.uniform(margin, res - margin, size=2)
    steps = rng.uniform(-res * 0.18, res * 0.18, size=(n_ctrl - 1, 2))
    base = np.concatenate([start[None], start[None] + np.cumsum(steps, axis=0)], axis=0)
    # keep the tube strictly inside the frame across the whole offset range,
    # so motion is a rigid translation and never clipped by the border
    base = np.clip(base, margin, res - margin)
    radius = rng.uniform(res / 40, res / 26)
    if class_id > 0:
        color = CLASS_COLORS[class_id]
    else:
        color = DISTRACTOR_COLOR
    return _Tube(
        base=base,
        radius=radius,
        color=color,
        class_id=class_id,
        offset=np.zeros(2),
        velocity=rng.uniform(-cfg.max_step, cfg.max_step, size=2),
    )


def _advance_tube(tube: _Tube, rng: np.random.Generator, cfg: SynthConfig) -> None:
    tube.velocity += rng.uniform(-0.4, 0.4, size=2)
    speed = np.linalg.norm(tube.velocity)
    if speed > cfg.max_step:
        tube.velocity *= cfg.max_step / speed
    tube.offset = _reflect(tube.offset + tube.velocity, cfg.resolution * 0.1)
    if rng.random() < cfg.jump_probability:
        tube.offset = _reflect(tube.offset + rng.uniform(-cfg.jump_scale, cfg.jump_scale, 2), cfg.resolution * 0.1)


def _background(rng: np.random.Generator, res: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.65, size=(8, 8))
    t = torch.from_numpy(coarse)[None, None]
    smooth = F.interpolate(t, size=(res, res), mode="bilinear", align_corners=False)[0, 0].numpy()
    noise = rng.normal(0.0, 0.02, size=(res, res))
    base = np.clip(smooth + noise, 0.0, 1.0)
    tint = np.array([1.0, 0.72, 0.68])
    return np.clip(base[..., None] * tint[None, None, :], 0.0, 1.0)


def _render_video(video_seed: int, cfg: SynthConfig, video_dir: Path) -> None:
    rng = np.random.default_rng(video_seed)
    res = cfg.resolution
    background = _background(rng, res)
    tubes = [_make_tube(rng, cfg, 1 + i % 2) for i in range(cfg.tube_count)]
    tubes += [_make_tube(rng, cfg, 0) for _ in range(cfg.distractor_count)]
    phase = rng.uniform(0.0, 2.0 * math.pi)

    frames_dir = video_dir / "frames"
    masks_dir = video_dir / "masks"
    frames_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)

    for t in range(cfg.frames_per_video):
        if t > 0:
            for tube in tubes:
                _advance_tube(tube, rng, cfg)
        frame = background.copy()
        mask = np.zeros((res, res), dtype=np.uint8)
        for tube in tubes:  # labeled tubes drawn last so masks match exactly
            if tube.class_id == 0:
                stencil = _curve_mask(tube.base + tube.offset, tube.radius, res)
                frame[stencil] = tube.color
        for tube in tubes:
            if tube.class_id > 0:
                stencil = _curve_mask(tube.base + tube.offset, tube.radius, res)
                frame[stencil] = tube.color
                mask[stencil] = tube.class_id
        brightness = 1.0 + cfg.brightness_amplitude * math.sin(
            2.0 * math.pi * t / max(cfg.frames_per_video, 1) + phase
        )
        frame = np.clip(frame * brightness, 0.0, 1.0)

        Image.fromarray((frame * 255).round().astype(np.uint8)).save(
            frames_dir / f"frame_{t:05d}.png"
        )
        mask_img = Image.fromarray(mask, mode="P")
        mask_img.putpalette(MASK_PALETTE)
        mask_img.save(masks_dir / f"frame_{t:05d}.png")


def synth_generate(cfg: SynthConfig, out_root: str | Path) -> list[Path]:
    """Render the synthetic dataset; byte-deterministic in the seed."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    dirs = []
    for v in range(cfg.num_videos):
        video_dir = out_root / f"video_{v:03d}"
        _render_video(cfg.seed * 100003 + v, cfg, video_dir)
        dirs.append(video_dir)
    return dirs
