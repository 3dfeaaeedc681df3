"""Energy estimation head: preference fusion, a GRU over behavior-augmented
road embeddings, gated feature fusion, and the vehicle-type output projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .core import VEHICLE_TYPES
from .behavior import GRULayer


@dataclass(frozen=True)
class SegmentEstimate:
    segment_id: str
    predicted_energy: float
    predicted_speed: float


@dataclass(frozen=True)
class EstimateResult:
    """One trip estimate: total energy plus per-segment derived quantities."""

    total: float
    per_segment: tuple[SegmentEstimate, ...]
    behaviors: tuple[tuple[float, ...], ...]  # de-standardized [n, f]
    reference_trip_ids: tuple[str, ...]
    reference_weights: tuple[float, ...]
    used_fallback_stats: bool


class PreferenceFusion(nn.Module):
    """Score each preference vector against the trip embedding and mix them."""

    def __init__(self, cfg: ModelConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.w = nn.Linear(cfg.dim, cfg.dim, dtype=dtype)

    def forward(
        self, trip_vec: torch.Tensor, prefs: torch.Tensor, pref_valid: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """trip_vec: [B, d]; prefs: [B, K, d]; pref_valid: [B, K] bool with at
        least one True per row. Returns (fused [B, d], weights [B, K])."""
        logits = self.w(trip_vec.unsqueeze(1) * prefs).sum(dim=-1)
        logits = logits.masked_fill(~pref_valid, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        fused = (weights.unsqueeze(-1) * prefs).sum(dim=1)
        return fused, weights


class GateFuse(nn.Module):
    """Learned convex combination: g*a + (1-g)*b with g = sigmoid(W[a||b]+c)."""

    def __init__(self, dim: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.gate = nn.Linear(2 * dim, dim, dtype=dtype)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        g = torch.sigmoid(self.gate(torch.cat([a, b], dim=-1)))
        return g * a + (1.0 - g) * b


class EstimatorHead(nn.Module):
    """Fuses preference, trip, and route context into the scalar estimate."""

    def __init__(self, cfg: ModelConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        d = cfg.dim
        gru_in = d + (cfg.n_behaviors if cfg.behavior_mode != "off" else 0)
        self.route_gru = GRULayer(gru_in, d, dtype=dtype)
        self.gate_pref_trip = GateFuse(d, dtype=dtype)
        self.gate_route = GateFuse(d, dtype=dtype)
        self.mlp = nn.Sequential(
            nn.Linear(d, cfg.mlp_hidden, dtype=dtype),
            nn.ReLU(),
            nn.Linear(cfg.mlp_hidden, d, dtype=dtype),
        )
        self.vehicle_emb = nn.Parameter(torch.randn(len(VEHICLE_TYPES), d, dtype=dtype) / d**0.5)

    def forward(
        self,
        fused_pref: torch.Tensor,
        trip_vec: torch.Tensor,
        road_seq: torch.Tensor,
        behaviors: torch.Tensor | None,
        route_lens: torch.Tensor,
        vehicle_type: torch.Tensor,
    ) -> torch.Tensor:
        """Returns standardized energy estimates [B]."""
        gru_in = road_seq if behaviors is None else torch.cat([road_seq, behaviors], dim=-1)
        hidden = self.route_gru(gru_in)
        last = hidden[torch.arange(hidden.shape[0], device=hidden.device), route_lens - 1]
        h = self.gate_route(self.gate_pref_trip(fused_pref, trip_vec), last)
        return (self.vehicle_emb[vehicle_type] * self.mlp(h)).sum(dim=-1)


def vehicle_type_index(vehicle_type: str) -> int:
    try:
        return VEHICLE_TYPES.index(vehicle_type)
    except ValueError:
        raise ValueError(f"unknown vehicle type {vehicle_type!r}; expected one of {VEHICLE_TYPES}") from None
