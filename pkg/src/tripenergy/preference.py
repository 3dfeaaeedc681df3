"""Preference encoding: positional encodings over distance/time, a strided
behavior-extraction convolution, and a single transformer layer pooled to one
preference vector per historical trip.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import ModelConfig


def sinusoid_encoding(values: torch.Tensor, max_const: float, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of scalar positions.

    Dimension 2k carries sin(a / max_const^(2k/dim)), dimension 2k+1 the
    matching cosine. values may have any shape; one dim axis is appended.
    """
    if dim % 2 != 0:
        raise ValueError("encoding dimension must be even")
    if max_const <= 0:
        raise ValueError("max_const must be positive")
    exponents = torch.arange(0, dim, 2, dtype=values.dtype, device=values.device) / dim
    divisors = max_const**exponents
    angles = values.unsqueeze(-1) / divisors
    out = torch.zeros(*values.shape, dim, dtype=values.dtype, device=values.device)
    out[..., 0::2] = torch.sin(angles)
    out[..., 1::2] = torch.cos(angles)
    return out


def attach_encodings(
    state_seq: torch.Tensor,
    positions: torch.Tensor,
    times: torch.Tensor,
    dist_max: float,
    time_max: float,
) -> torch.Tensor:
    """Add distance and time encodings to embedded state vectors, element-wise."""
    if state_seq.shape[:-1] != positions.shape or positions.shape != times.shape:
        raise ValueError("state/position/time sequences must align")
    d = state_seq.shape[-1]
    return state_seq + sinusoid_encoding(positions, dist_max, d) + sinusoid_encoding(times, time_max, d)


class BehaviorConv(nn.Module):
    """Strided convolution collapsing each window of q states into one row.

    Depthwise mode uses one filter value per (offset, channel); full mode mixes
    channels with a q*d*d kernel. SELU activation either way.
    """

    def __init__(self, cfg: ModelConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        d, q = cfg.dim, cfg.window
        self.window = q
        self.mode = cfg.conv_mode
        if self.mode == "depthwise":
            self.filter = nn.Parameter(torch.randn(q, d, dtype=dtype) / math.sqrt(q))
        else:
            self.filter = nn.Parameter(torch.randn(q, d, d, dtype=dtype) / math.sqrt(q * d))
        self.bias = nn.Parameter(torch.zeros(d, dtype=dtype))

    def out_len(self, m: int) -> int:
        return -(-m // self.window)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: [B, m, d], zero-padded beyond each sequence's true length.
        Returns [B, ceil(m/q), d]."""
        b, m, d = x.shape
        q = self.window
        l_max = self.out_len(m)
        if l_max * q != m:
            pad = torch.zeros(b, l_max * q - m, d, dtype=x.dtype, device=x.device)
            x = torch.cat([x, pad], dim=1)
        windows = x.reshape(b, l_max, q, d)
        if self.mode == "depthwise":
            z = torch.einsum("blqd,qd->bld", windows, self.filter)
        else:
            z = torch.einsum("blqd,qde->ble", windows, self.filter)
        return torch.selu(z + self.bias)


class TransformerLayer(nn.Module):
    """One post-norm transformer encoder layer, h heads, feed-forward width 2d.

    No positional encoding here: order information is already added to the
    inputs before the convolution.
    """

    def __init__(self, dim: int, heads: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("heads must divide dim")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = nn.Linear(dim, dim, dtype=dtype)
        self.wk = nn.Linear(dim, dim, dtype=dtype)
        self.wv = nn.Linear(dim, dim, dtype=dtype)
        self.wo = nn.Linear(dim, dim, dtype=dtype)
        self.norm1 = nn.LayerNorm(dim, dtype=dtype)
        self.norm2 = nn.LayerNorm(dim, dtype=dtype)
        self.ff1 = nn.Linear(dim, 2 * dim, dtype=dtype)
        self.ff2 = nn.Linear(2 * dim, dim, dtype=dtype)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        """x: [B, L, d]; valid: [B, L] bool, True where the row is real."""
        b, l, d = x.shape
        h, hd = self.heads, self.head_dim

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.reshape(b, l, h, hd).transpose(1, 2)  # [B, h, L, hd]

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if valid is not None:
            logits = logits.masked_fill(~valid[:, None, None, :], float("-inf"))
        att = torch.softmax(logits, dim=-1)
        mixed = (att @ v).transpose(1, 2).reshape(b, l, d)
        x = self.norm1(x + self.wo(mixed))
        x = self.norm2(x + self.ff2(torch.relu(self.ff1(x))))
        return x


class PreferenceEncoder(nn.Module):
    """Embedded states (+ positional encodings) -> one preference vector each."""

    def __init__(self, cfg: ModelConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.cfg = cfg
        self.skip_conv = cfg.state_mode == "state"
        if not self.skip_conv:
            self.conv = BehaviorConv(cfg, dtype=dtype)
        self.encoder = TransformerLayer(cfg.dim, cfg.heads, dtype=dtype)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """x: [B, m_max, d] zero-padded state embeddings with encodings already
        attached; lengths: [B] true state counts. Returns z: [B, d]."""
        if self.skip_conv:
            rows = x
            row_lens = lengths
        else:
            rows = self.conv(x)
            row_lens = -(-lengths // self.conv.window)
        l_max = rows.shape[1]
        valid = torch.arange(l_max, device=x.device)[None, :] < row_lens[:, None]
        encoded = self.encoder(rows, valid)
        mask = valid.to(rows.dtype).unsqueeze(-1)
        return (encoded * mask).sum(dim=1) / row_lens.to(rows.dtype).unsqueeze(-1)
