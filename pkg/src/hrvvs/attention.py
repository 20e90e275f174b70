"""Multi-head cross-attention shared by the interaction and fusion modules."""

from __future__ import annotations

import torch
import torch.nn as nn


class AttentionConfigError(ValueError):
    """Raised on inconsistent attention dimensions."""


class MultiHeadCrossAttention(nn.Module):
    """Pre-norm multi-head cross-attention with optional zero-initialized output.

    Queries of width ``dim`` attend over key/value tokens of width ``kv_dim``.
    With ``zero_init_out`` the output projection starts at exactly zero, so a
    residual caller is an exact identity at initialization. Dropout is applied
    to the projected output (disabled in eval mode).
    """

    def __init__(
        self,
        dim: int,
        kv_dim: int | None = None,
        heads: int = 4,
        dropout: float = 0.1,
        zero_init_out: bool = True,
    ) -> None:
        super().__init__()
        if dim % heads != 0:
            raise AttentionConfigError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5

        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(kv_dim)
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(kv_dim, dim)
        self.to_v = nn.Linear(kv_dim, dim)
        self.to_out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        if zero_init_out:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor | None = None,
        return_attn: bool = False,
    ) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
        """Attend ``query`` [B, Nq, dim] over ``key``/``value`` [B, Nk, kv_dim].

        ``value`` defaults to ``key``. Returns [B, Nq, dim]; with
        ``return_attn`` also the softmax attention [B, heads, Nq, Nk].
        """
        if value is None:
            value = key
        if key.shape[:-1] != value.shape[:-1]:
            raise AttentionConfigError("key and value token counts must match")
        b, nq, _ = query.shape
        nk = key.shape[1]

        q = self.to_q(self.norm_q(query))
        k = self.to_k(self.norm_kv(key))
        v = self.to_v(self.norm_kv(value))

        q = q.reshape(b, nq, self.heads, self.head_dim).transpose(1, 2)
        k = k.reshape(b, nk, self.heads, self.head_dim).transpose(1, 2)
        v = v.reshape(b, nk, self.heads, self.head_dim).transpose(1, 2)

        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, self.dim)
        out = self.drop(self.to_out(out))
        if return_attn:
            return out, attn
        return out
