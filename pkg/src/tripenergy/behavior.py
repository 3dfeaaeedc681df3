"""Behavior prediction along the target route: a GRU over road embeddings and
multi-head attention from each road onto the preference vectors.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import ModelConfig


class GRULayer(nn.Module):
    """Plain GRU recurrence, written out so that double backward works.

    Gate layout matches the conventional reset/update/candidate ordering with
    zero initial hidden state.
    """

    def __init__(self, input_dim: int, hidden_dim: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        bound = 1.0 / math.sqrt(hidden_dim)

        def init(*shape: int) -> nn.Parameter:
            return nn.Parameter(torch.empty(*shape, dtype=dtype).uniform_(-bound, bound))

        self.w_ih = init(3 * hidden_dim, input_dim)
        self.b_ih = init(3 * hidden_dim)
        self.w_hh = init(3 * hidden_dim, hidden_dim)
        self.b_hh = init(3 * hidden_dim)

    def step(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        gi = x @ self.w_ih.T + self.b_ih
        gh = h @ self.w_hh.T + self.b_hh
        i_r, i_z, i_n = gi.chunk(3, dim=-1)
        h_r, h_z, h_n = gh.chunk(3, dim=-1)
        reset = torch.sigmoid(i_r + h_r)
        update = torch.sigmoid(i_z + h_z)
        cand = torch.tanh(i_n + reset * h_n)
        return (1.0 - update) * cand + update * h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: [B, n, input_dim] -> hidden states [B, n, hidden_dim]."""
        b, n, _ = x.shape
        h = torch.zeros(b, self.hidden_dim, dtype=x.dtype, device=x.device)
        outs = []
        for i in range(n):
            h = self.step(x[:, i], h)
            outs.append(h)
        return torch.stack(outs, dim=1)


class PreferenceAttention(nn.Module):
    """Per-road multi-head attention over preference vectors.

    Each head has full d x d query/key/value maps; head outputs are
    concatenated and mapped to the f behavior targets by one affine layer.
    """

    def __init__(self, cfg: ModelConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        d, h = cfg.dim, cfg.heads
        self.dim = d
        self.heads = h
        scale = 1.0 / math.sqrt(d)
        self.wq = nn.Parameter(torch.randn(h, d, d, dtype=dtype) * scale)
        self.wk = nn.Parameter(torch.randn(h, d, d, dtype=dtype) * scale)
        self.wv = nn.Parameter(torch.randn(h, d, d, dtype=dtype) * scale)
        self.out = nn.Linear(h * d, cfg.n_behaviors, dtype=dtype)

    def forward(
        self,
        route_hidden: torch.Tensor,
        prefs: torch.Tensor,
        pref_valid: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """route_hidden: [B, n, d]; prefs: [B, K, d]; pref_valid: [B, K] bool
        with at least one True per row. Returns (behaviors [B, n, f],
        attention weights [B, heads, n, K])."""
        q = torch.einsum("bnd,hde->bhne", route_hidden, self.wq)
        k = torch.einsum("bkd,hde->bhke", prefs, self.wk)
        v = torch.einsum("bkd,hde->bhke", prefs, self.wv)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.dim)
        logits = logits.masked_fill(~pref_valid[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        heads = weights @ v  # [B, h, n, d]
        b, h, n, d = heads.shape
        concat = heads.permute(0, 2, 1, 3).reshape(b, n, h * d)
        return self.out(concat), weights

    def null_behavior(self, null_pref: torch.Tensor) -> torch.Tensor:
        """Behavior prediction for a driver with no usable history: attention
        over a single learned null preference collapses to its value maps."""
        heads = torch.einsum("d,hde->he", null_pref, self.wv).reshape(-1)
        return self.out(heads)


class RoadOnlyBehavior(nn.Module):
    """Ablation head: behaviors from the route hidden state alone."""

    def __init__(self, cfg: ModelConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.out = nn.Linear(cfg.dim, cfg.n_behaviors, dtype=dtype)

    def forward(self, route_hidden: torch.Tensor) -> torch.Tensor:
        return self.out(route_hidden)
