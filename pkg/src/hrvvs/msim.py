"""Multi-view spatiotemporal interaction: three residual cross-attention updates.

Order is fixed: (1) the current global feature queries the memory tokens,
(2) the history-updated global queries multi-scale pooled local features,
(3) each local queries the twice-updated global. Every update is residual,
so zero-initialized output projections make the whole module an identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import MultiHeadCrossAttention
from .encoding import grid_encoding, index_encoding

LOCAL_POOL_DIVISORS = (1, 2, 4)


@dataclass
class MsimOutput:
    global_history: torch.Tensor  # G after the memory update
    global_updated: torch.Tensor  # G after the locals update
    locals_updated: list[torch.Tensor]


def to_tokens(feature: torch.Tensor) -> torch.Tensor:
    """C x H x W -> [H*W, C], row-major."""
    c = feature.shape[0]
    return feature.reshape(c, -1).transpose(0, 1)


def from_tokens(tokens: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """[H*W, C] -> C x H x W, inverse of :func:`to_tokens`."""
    h, w = hw
    return tokens.transpose(0, 1).reshape(-1, h, w)


class Msim(nn.Module):
    def __init__(
        self,
        dim: int,
        memory_token_dim: int,
        heads: int = 4,
        dropout: float = 0.1,
        positional_encodings: bool = True,
    ) -> None:
        super().__init__()
        self.dim = dim
        self.positional_encodings = positional_encodings
        self.attn_history = MultiHeadCrossAttention(
            dim, kv_dim=memory_token_dim, heads=heads, dropout=dropout
        )
        self.attn_locals = MultiHeadCrossAttention(dim, heads=heads, dropout=dropout)
        self.attn_global_to_local = MultiHeadCrossAttention(dim, heads=heads, dropout=dropout)

    def _grid_pe(self, h: int, w: int, like: torch.Tensor) -> torch.Tensor:
        pe = grid_encoding(h, w, self.dim, dtype=like.dtype).to(like.device)
        return pe if self.positional_encodings else torch.zeros_like(pe)

    def update_global_with_history(
        self, global5: torch.Tensor, memory_tokens: torch.Tensor
    ) -> torch.Tensor:
        """Residual memory read; an empty bank leaves the input untouched."""
        if memory_tokens.shape[0] == 0:
            return global5
        hw = global5.shape[-2:]
        q = to_tokens(global5).unsqueeze(0)
        kv = memory_tokens.unsqueeze(0).to(q.dtype)
        out = q + self.attn_history(q, kv)
        return from_tokens(out.squeeze(0), hw)

    def pooled_local_tokens(self, locals5: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """Key and value sequences from every local view at pooling factors 1, 2, 4.

        Keys carry a fixed sinusoidal tag for view index, pooling level, and
        grid position (unless positional encodings are disabled); values stay
        untagged feature content.
        """
        keys, values = [], []
        for m, feat in enumerate(locals5):
            _, h, w = feat.shape
            for level, div in enumerate(LOCAL_POOL_DIVISORS):
                size = (max(1, h // div), max(1, w // div))
                pooled = F.adaptive_avg_pool2d(feat.unsqueeze(0), size).squeeze(0)
                toks = to_tokens(pooled)
                values.append(toks)
                if self.positional_encodings:
                    pe = self._grid_pe(size[0], size[1], toks)
                    tag = index_encoding(m * len(LOCAL_POOL_DIVISORS) + level, self.dim, dtype=toks.dtype)
                    keys.append(toks + pe + tag.to(toks.device))
                else:
                    keys.append(toks)
        return torch.cat(keys, dim=0), torch.cat(values, dim=0)

    def update_global_with_locals(
        self, global_history: torch.Tensor, locals5: list[torch.Tensor]
    ) -> torch.Tensor:
        hw = global_history.shape[-2:]
        q = to_tokens(global_history).unsqueeze(0)
        key, value = self.pooled_local_tokens(locals5)
        out = q + self.attn_locals(q, key.unsqueeze(0), value.unsqueeze(0))
        return from_tokens(out.squeeze(0), hw)

    def update_locals(
        self, locals5: list[torch.Tensor], global_updated: torch.Tensor
    ) -> list[torch.Tensor]:
        """Per-local residual update querying the updated global feature.

        Keys are the global tokens plus a spatial sinusoidal encoding; values
        are the raw global tokens.
        """
        gh, gw = global_updated.shape[-2:]
        g_tokens = to_tokens(global_updated)
        key = g_tokens + self._grid_pe(gh, gw, g_tokens)
        n_local = len(locals5)
        hw = locals5[0].shape[-2:]
        q = torch.stack([to_tokens(f) for f in locals5], dim=0)
        out = q + self.attn_global_to_local(
            q,
            key.unsqueeze(0).expand(n_local, -1, -1),
            g_tokens.unsqueeze(0).expand(n_local, -1, -1),
        )
        return [from_tokens(out[m], hw) for m in range(n_local)]

    def forward(
        self,
        global5: torch.Tensor,
        locals5: list[torch.Tensor],
        memory_tokens: torch.Tensor,
    ) -> MsimOutput:
        g_h = self.update_global_with_history(global5, memory_tokens)
        g_updated = self.update_global_with_locals(g_h, locals5)
        locals_updated = self.update_locals(locals5, g_updated)
        return MsimOutput(
            global_history=g_h, global_updated=g_updated, locals_updated=locals_updated
        )
