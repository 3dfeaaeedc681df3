"""The full estimation model: embeddings, preference encoding, behavior
prediction, and the energy head, wired over padded driver batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .behavior import GRULayer, PreferenceAttention, RoadOnlyBehavior
from .estimator import EstimateResult, EstimatorHead, PreferenceFusion, SegmentEstimate
from .features import EmbeddingTables, Scalers, destandardize_label
from .preference import PreferenceEncoder
from .prep import TargetBatch


@dataclass
class ModelOutput:
    y_std: torch.Tensor  # [B] standardized energy estimates
    behaviors: Optional[torch.Tensor]  # [B, n_max, f] standardized
    pref_weights: Optional[torch.Tensor]  # [B, K_max]
    attention: Optional[torch.Tensor]  # [B, heads, n_max, K_max]


class EnergyModel(nn.Module):
    """Composable over ablation switches; the full model uses every block."""

    def __init__(self, cfg: ModelConfig, n_road_types: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.embedder = EmbeddingTables(cfg, n_road_types, dtype=dtype)
        self.null_pref = nn.Parameter(torch.randn(d, dtype=dtype) / d**0.5)
        if cfg.use_preferences:
            self.pref_encoder = PreferenceEncoder(cfg, dtype=dtype)
            self.pref_fusion = PreferenceFusion(cfg, dtype=dtype)
        if cfg.behavior_mode in ("b2b", "r2b"):
            self.route_gru = GRULayer(d, d, dtype=dtype)
        if cfg.behavior_mode == "b2b":
            if not cfg.use_preferences:
                raise ValueError("behavior prediction from preferences requires use_preferences")
            self.pref_attention = PreferenceAttention(cfg, dtype=dtype)
        elif cfg.behavior_mode == "r2b":
            self.road_behavior = RoadOnlyBehavior(cfg, dtype=dtype)
        self.head = EstimatorHead(cfg, dtype=dtype)

    def encode_history(self, batch: TargetBatch) -> Optional[torch.Tensor]:
        """Encode every referenced historical trip once; row 0 stays a dummy."""
        if not self.cfg.use_preferences or batch.hist_states is None:
            return None
        valid = (
            torch.arange(batch.hist_states.shape[1])[None, :] < batch.hist_lens[:, None]
        ).to(batch.hist_states.dtype)
        x = self.embedder.embed_states(batch.hist_states) * valid.unsqueeze(-1) + batch.hist_enc
        return self.pref_encoder(x, batch.hist_lens)

    def forward(self, batch: TargetBatch) -> ModelOutput:
        cfg = self.cfg
        b = batch.size
        trip_vec = self.embedder.embed_trip(batch.stat_cont, batch.month, batch.hour)
        road_seq = self.embedder.embed_roads(batch.road_cat, batch.road_cont)

        prefs = None
        pref_weights = None
        if cfg.use_preferences:
            z_table = self.encode_history(batch)
            assert z_table is not None
            prefs = z_table[batch.ref_index]  # [B, K, d]
            fused, pref_weights = self.pref_fusion(trip_vec, prefs, batch.ref_valid)
            null = self.null_pref.unsqueeze(0).expand(b, -1)
            fused_pref = torch.where(batch.has_refs.unsqueeze(-1), fused, null)
        else:
            fused_pref = self.null_pref.unsqueeze(0).expand(b, -1)

        behaviors = None
        attention = None
        if cfg.behavior_mode == "b2b":
            assert prefs is not None
            hidden = self.route_gru(road_seq)
            predicted, attention = self.pref_attention(hidden, prefs, batch.ref_valid)
            null_b = self.pref_attention.null_behavior(self.null_pref)
            behaviors = torch.where(
                batch.has_refs.unsqueeze(-1).unsqueeze(-1), predicted, null_b.reshape(1, 1, -1)
            )
        elif cfg.behavior_mode == "r2b":
            behaviors = self.road_behavior(self.route_gru(road_seq))

        y_std = self.head(fused_pref, trip_vec, road_seq, behaviors, batch.n_lens, batch.vtype)
        return ModelOutput(y_std=y_std, behaviors=behaviors, pref_weights=pref_weights, attention=attention)


SPEED_IDX = 0  # behavior-vector component order: speed, accel, e/hour, e/km
EPK_IDX = 3


def estimate_from_batch(model: EnergyModel, batch: TargetBatch, sc: Scalers) -> EstimateResult:
    """Run one inference batch of size 1 and de-standardize into an EstimateResult."""
    with torch.no_grad():
        out = model(batch)
    return output_to_estimate(out, batch, sc)


def output_to_estimate(out: ModelOutput, batch: TargetBatch, sc: Scalers) -> EstimateResult:
    """De-standardize a single-target forward output into physical units."""
    if batch.size != 1:
        raise ValueError("estimate expects a single-target batch")
    total = destandardize_label(float(out.y_std[0]), sc)
    n = int(batch.n_lens[0])
    seg_len_km = batch.seg_len_km[0, :n].numpy()

    if out.behaviors is not None:
        mean = np.asarray(sc.state_mean[1:])
        std = np.asarray(sc.state_std[1:])
        beh = out.behaviors[0, :n].numpy() * std + mean
        seg_energy = beh[:, EPK_IDX] * seg_len_km
        seg_speed = beh[:, SPEED_IDX]
    else:
        # no behavior decoder in this variant: split the total by length share
        share = seg_len_km / seg_len_km.sum() if seg_len_km.sum() > 0 else np.full(n, 1.0 / n)
        seg_energy = total * share
        seg_speed = np.full(n, sc.state_mean[1])
        beh = np.zeros((n, 0))

    if out.pref_weights is not None and bool(batch.has_refs[0]):
        k = len(batch.ref_ids[0])
        weights = tuple(float(w) for w in out.pref_weights[0, :k])
    else:
        weights = ()

    route = batch.routes[0]
    segments = tuple(
        SegmentEstimate(
            segment_id=route[i],
            predicted_energy=float(seg_energy[i]),
            predicted_speed=float(seg_speed[i]),
        )
        for i in range(n)
    )
    return EstimateResult(
        total=total,
        per_segment=segments,
        behaviors=tuple(tuple(float(v) for v in row) for row in beh),
        reference_trip_ids=batch.ref_ids[0],
        reference_weights=weights,
        used_fallback_stats=bool(batch.fallback[0]),
    )
