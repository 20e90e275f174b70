"""Fixed sinusoidal encodings for memory tokens and attention keys."""

from __future__ import annotations

import math

import torch


def sinusoid_features(position: torch.Tensor, n_dims: int, max_period: float = 10000.0) -> torch.Tensor:
    """Classic transformer sine/cosine features for scalar positions.

    ``position`` has shape [...]; the result has shape [..., n_dims] with
    alternating sin/cos at geometrically spaced frequencies.
    """
    if n_dims <= 0:
        raise ValueError("n_dims must be positive")
    half = (n_dims + 1) // 2
    freqs = torch.exp(
        -math.log(max_period)
        * torch.arange(half, dtype=position.dtype, device=position.device)
        / max(half, 1)
    )
    angles = position.unsqueeze(-1) * freqs
    feats = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    return feats[..., :n_dims]


def grid_encoding(rows: int, cols: int, n_dims: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Row/column sinusoidal encoding for an r x c grid, flattened row-major.

    Returns [rows * cols, n_dims]; the first half of the channels encodes the
    row index, the second half the column index.
    """
    d_row = n_dims // 2
    d_col = n_dims - d_row
    r = torch.arange(rows, dtype=dtype)
    c = torch.arange(cols, dtype=dtype)
    row_feats = sinusoid_features(r, d_row)  # rows x d_row
    col_feats = sinusoid_features(c, d_col)  # cols x d_col
    row_part = row_feats.unsqueeze(1).expand(rows, cols, d_row)
    col_part = col_feats.unsqueeze(0).expand(rows, cols, d_col)
    return torch.cat([row_part, col_part], dim=-1).reshape(rows * cols, n_dims)


def memory_token_encoding(
    age: int, rows: int, cols: int, n_dims: int = 16, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Joint (age, row, col) encoding appended to each memory token.

    Half the channels encode the frame age, the rest split between the two
    spatial coordinates. Returns [rows * cols, n_dims].
    """
    d_age = n_dims // 2
    d_spatial = n_dims - d_age
    age_feats = sinusoid_features(torch.tensor(float(age), dtype=dtype), d_age)
    age_part = age_feats.expand(rows * cols, d_age)
    spatial_part = grid_encoding(rows, cols, d_spatial, dtype=dtype)
    return torch.cat([age_part, spatial_part], dim=-1)


def index_encoding(index: int, n_dims: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Single-position sinusoidal vector, used to tag view identity."""
    return sinusoid_features(torch.tensor(float(index), dtype=dtype), n_dims)
