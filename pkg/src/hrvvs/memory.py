"""Bounded per-video memory of historical global features.

The bank keeps the newest ``capacity`` frames. Once it overflows, each
surviving entry is average-pooled by a factor that doubles with its age
(capped), so older frames contribute exponentially fewer tokens. Tokens are
emitted oldest-to-newest with a concatenated (age, row, col) sinusoidal
encoding. The decoder-level global feature of the newest frame is kept
uncompressed for the fusion weighting of the next frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F

from .encoding import memory_token_encoding


class MemoryContractError(RuntimeError):
    """Raised when push ordering or entry invariants are violated."""


def _pooled_side(side: int, factor: int) -> int:
    return max(1, math.ceil(side / factor))


@dataclass
class MemoryEntry:
    frame_index: int
    features: dict[int, torch.Tensor]  # stage -> C x H_s x W_s at current compression
    base_shapes: dict[int, tuple[int, int]]
    factor: int = 1

    def compress_to(self, target_factor: int) -> None:
        if target_factor < self.factor:
            raise MemoryContractError("compression factor must never decrease")
        if target_factor == self.factor:
            return
        for stage, feat in self.features.items():
            h0, w0 = self.base_shapes[stage]
            size = (_pooled_side(h0, target_factor), _pooled_side(w0, target_factor))
            if feat.shape[-2:] != size:
                self.features[stage] = F.adaptive_avg_pool2d(feat.unsqueeze(0), size).squeeze(0)
        self.factor = target_factor

    def token_count(self) -> int:
        return sum(f.shape[-2] * f.shape[-1] for f in self.features.values())


@dataclass
class MemoryBank:
    """Ordered store of per-frame global features with age-based compression."""

    capacity: int = 4
    max_age_exp: int = 3
    stages: tuple[int, ...] = (5,)
    pe_dim: int = 16
    entries: list[MemoryEntry] = field(default_factory=list)
    _decoder_global: torch.Tensor | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def age_factor(self, age: int) -> int:
        return 2 ** min(age, self.max_age_exp)

    def push(
        self,
        features: Mapping[int, torch.Tensor] | torch.Tensor,
        t: int,
        decoder_global: torch.Tensor | None = None,
    ) -> None:
        """Append the frame-``t`` global features; compress on overflow.

        ``features`` maps encoder stage index to a C x H x W tensor (a bare
        tensor is treated as the deepest configured stage). ``decoder_global``
        is the decoder-penultimate global feature, kept uncompressed.
        """
        if self.entries and t <= self.entries[-1].frame_index:
            raise MemoryContractError(
                f"frame index {t} not greater than stored {self.entries[-1].frame_index}"
            )
        if isinstance(features, torch.Tensor):
            features = {self.stages[-1]: features}
        kept = {s: features[s].detach().clone() if not features[s].requires_grad else features[s]
                for s in self.stages if s in features}
        if not kept:
            raise MemoryContractError(f"no features provided for configured stages {self.stages}")
        entry = MemoryEntry(
            frame_index=t,
            features=dict(kept),
            base_shapes={s: (f.shape[-2], f.shape[-1]) for s, f in kept.items()},
        )
        self.entries.append(entry)
        if decoder_global is not None:
            self._decoder_global = decoder_global
        if len(self.entries) > self.capacity:
            self.compress()

    def compress(self) -> None:
        """Evict past capacity, then pool each survivor per its age.

        No-op when the bank is within capacity; safe to call repeatedly.
        """
        if len(self.entries) <= self.capacity:
            return
        self.entries = self.entries[len(self.entries) - self.capacity :]
        newest = len(self.entries) - 1
        for pos, entry in enumerate(self.entries):
            age = newest - pos
            entry.compress_to(self.age_factor(age))

    def tokens(self) -> torch.Tensor:
        """Concatenated memory tokens with positional encodings.

        Returns [n_tokens, C_max + pe_dim], ordered oldest-to-newest and
        row-major within each feature map. Stages with fewer channels than
        the widest configured stage are zero-padded so one key/value
        projection serves the whole sequence. Empty bank gives 0 tokens.
        """
        if not self.entries:
            c_max = 0
            return torch.zeros(0, c_max + self.pe_dim)
        c_max = max(
            f.shape[0] for entry in self.entries for f in entry.features.values()
        )
        newest = len(self.entries) - 1
        chunks = []
        for pos, entry in enumerate(self.entries):
            age = newest - pos
            for stage in sorted(entry.features):
                feat = entry.features[stage]
                c, h, w = feat.shape
                toks = feat.reshape(c, h * w).transpose(0, 1)
                if c < c_max:
                    toks = F.pad(toks, (0, c_max - c))
                pe = memory_token_encoding(age, h, w, self.pe_dim, dtype=toks.dtype).to(toks.device)
                chunks.append(torch.cat([toks, pe], dim=-1))
        return torch.cat(chunks, dim=0)

    def token_count(self) -> int:
        return sum(entry.token_count() for entry in self.entries)

    def expected_token_count(self, base_hw: tuple[int, int], n_pushed: int) -> int:
        """Closed-form token count after ``n_pushed`` single-stage pushes."""
        h, w = base_hw
        n_kept = min(n_pushed, self.capacity)
        compressed = n_pushed > self.capacity
        total = 0
        for age in range(n_kept):
            factor = self.age_factor(age) if compressed else 1
            total += _pooled_side(h, factor) * _pooled_side(w, factor)
        return total * len(self.stages)

    def previous_global(self) -> torch.Tensor | None:
        """Decoder-level global feature of the newest stored frame, if any."""
        return self._decoder_global

    def reset(self) -> None:
        self.entries.clear()
        self._decoder_global = None
