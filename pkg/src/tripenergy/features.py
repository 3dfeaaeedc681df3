"""Feature construction: train-split scalers, raw feature extraction, and the
learned embedding tables that project every feature family to R^d.

Raw extraction returns numpy arrays in standardized units; the embedding
tables are the only torch code here.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .core import DriverHistory, RoadNetwork, Trip
from .ingestion import extract_road_labels, trip_point_stats

N_STATE = 5  # time-of-day, speed, accel, energy/hour, energy/km
N_STAT_CONT = 5  # route length + the four behavior stats
N_ROAD_CONT = 2  # length_m, max_speed_kmh
N_BEHAVIOR = 4


@dataclass(frozen=True)
class Scalers:
    """Standardization constants fit on train-split trips only."""

    state_mean: tuple[float, ...]
    state_std: tuple[float, ...]
    stat_mean: tuple[float, ...]
    stat_std: tuple[float, ...]
    road_mean: tuple[float, ...]
    road_std: tuple[float, ...]
    label_mean: float
    label_std: float
    global_behavior: tuple[float, ...]  # raw-unit fallback for history-less drivers
    road_type_vocab: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "state_mean": list(self.state_mean),
            "state_std": list(self.state_std),
            "stat_mean": list(self.stat_mean),
            "stat_std": list(self.stat_std),
            "road_mean": list(self.road_mean),
            "road_std": list(self.road_std),
            "label_mean": self.label_mean,
            "label_std": self.label_std,
            "global_behavior": list(self.global_behavior),
            "road_type_vocab": list(self.road_type_vocab),
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "Scalers":
        return Scalers(
            state_mean=tuple(d["state_mean"]),
            state_std=tuple(d["state_std"]),
            stat_mean=tuple(d["stat_mean"]),
            stat_std=tuple(d["stat_std"]),
            road_mean=tuple(d["road_mean"]),
            road_std=tuple(d["road_std"]),
            label_mean=float(d["label_mean"]),
            label_std=float(d["label_std"]),
            global_behavior=tuple(d["global_behavior"]),
            road_type_vocab=tuple(d["road_type_vocab"]),
        )


def _safe_std(x: np.ndarray, axis=0) -> np.ndarray:
    std = x.std(axis=axis)
    return np.where(std < 1e-12, 1.0, std)


def route_length_m(route: Sequence[str], network: RoadNetwork) -> float:
    return float(sum(network[sid].length_m for sid in route))


def fit_scalers(histories: Sequence[DriverHistory], network: RoadNetwork) -> Scalers:
    """Fit all standardization constants from train-split trips with routes."""
    train_trips = []
    for hist in histories:
        if hist.splits is None:
            raise ValueError(f"driver {hist.driver_id}: splits required before fitting scalers")
        by_id = hist.trips_by_id()
        train_trips.extend(by_id[tid] for tid in hist.splits.train if by_id[tid].route)
    if not train_trips:
        raise ValueError("no train trips with routes; cannot fit scalers")

    states = np.concatenate([np.array([list(p.state) for p in t.trajectory], dtype=np.float64) for t in train_trips if t.trajectory])
    stats = np.array(
        [[route_length_m(t.route, network), *trip_point_stats(t)] for t in train_trips],
        dtype=np.float64,
    )
    roads = np.array([[seg.length_m, seg.max_speed_kmh] for seg in network.segments()], dtype=np.float64)
    labels = np.array([t.total_energy for t in train_trips if t.total_energy is not None], dtype=np.float64)
    if labels.size == 0:
        raise ValueError("train trips carry no energy labels")

    return Scalers(
        state_mean=tuple(states.mean(axis=0)),
        state_std=tuple(_safe_std(states)),
        stat_mean=tuple(stats.mean(axis=0)),
        stat_std=tuple(_safe_std(stats)),
        road_mean=tuple(roads.mean(axis=0)),
        road_std=tuple(_safe_std(roads)),
        label_mean=float(labels.mean()),
        label_std=float(_safe_std(labels, axis=None)),
        global_behavior=tuple(stats[:, 1:].mean(axis=0)),
        road_type_vocab=tuple(network.road_types()),
    )


def standardize_label(y: float, sc: Scalers) -> float:
    return (y - sc.label_mean) / sc.label_std


def destandardize_label(y_std: float, sc: Scalers) -> float:
    return y_std * sc.label_std + sc.label_mean


# --- raw (pre-embedding) feature extraction --------------------------------


def trip_stat_raw(
    target: Trip,
    history_trips: Sequence[Trip],
    sc: Scalers,
    network: RoadNetwork,
) -> tuple[np.ndarray, int, int, bool]:
    """Standardized trip-level continuous features plus month/hour indices.

    history_trips is the pool the behavior stats aggregate over (the driver's
    train trips, never the target itself, never val/test). An empty pool
    falls back to the global training means, flagged.
    """
    pool = [t for t in history_trips if t.trip_id != target.trip_id and t.trajectory]
    fallback = not pool
    if fallback:
        behavior = np.asarray(sc.global_behavior, dtype=np.float64)
    else:
        behavior = np.array([trip_point_stats(t) for t in pool], dtype=np.float64).mean(axis=0)
    raw = np.concatenate(([route_length_m(target.route, network)], behavior))
    cont = (raw - np.asarray(sc.stat_mean)) / np.asarray(sc.stat_std)
    dt = datetime.fromtimestamp(target.departure_time, tz=timezone.utc)
    return cont, dt.month - 1, dt.hour, fallback


def road_raw(route: Sequence[str], network: RoadNetwork, sc: Scalers, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment categorical indices [n,3] and standardized continuous [n,2]."""
    vocab = {code: i for i, code in enumerate(sc.road_type_vocab)}
    cat = np.zeros((len(route), 3), dtype=np.int64)
    cont = np.zeros((len(route), N_ROAD_CONT), dtype=np.float64)
    for i, sid in enumerate(route):
        seg = network[sid]
        if seg.road_type not in vocab:
            raise ValueError(f"road type {seg.road_type!r} not in training vocabulary")
        cat[i] = (vocab[seg.road_type], min(seg.lanes, cfg.lanes_cap), int(seg.oneway))
        cont[i] = (seg.length_m, seg.max_speed_kmh)
    cont = (cont - np.asarray(sc.road_mean)) / np.asarray(sc.road_std)
    return cat, cont


def state_raw(trip: Trip, sc: Scalers) -> np.ndarray:
    """Standardized per-point state matrix [m, 5]."""
    if not trip.trajectory:
        raise ValueError(f"trip {trip.trip_id}: state features require a trajectory")
    arr = np.array([list(p.state) for p in trip.trajectory], dtype=np.float64)
    return (arr - np.asarray(sc.state_mean)) / np.asarray(sc.state_std)


def behavior_labels_raw(trip: Trip, sc: Scalers) -> np.ndarray:
    """Standardized per-segment behavior labels [n, 4] (state scalers, no tod)."""
    labels = extract_road_labels(trip)
    arr = np.array([list(b.values) for b in labels], dtype=np.float64)
    mean = np.asarray(sc.state_mean[1:])
    std = np.asarray(sc.state_std[1:])
    return (arr - mean) / std


def point_positions_times(trip: Trip) -> tuple[np.ndarray, np.ndarray]:
    p = np.array([pt.position_m for pt in trip.trajectory], dtype=np.float64)
    t = np.array([pt.elapsed_s for pt in trip.trajectory], dtype=np.float64)
    return p, t


# --- learned embedding tables ----------------------------------------------

N_MONTHS = 12
N_HOURS = 24


class EmbeddingTables(nn.Module):
    """Lookup tables for categorical features, per-field affine maps for
    continuous ones, and one linear projection per feature family down to d."""

    def __init__(self, cfg: ModelConfig, n_road_types: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        d = cfg.dim
        self.dim = d

        def table(rows: int) -> nn.Parameter:
            return nn.Parameter(torch.randn(rows, d, dtype=dtype) / d**0.5)

        self.month_emb = table(N_MONTHS)
        self.hour_emb = table(N_HOURS)
        self.road_type_emb = table(n_road_types)
        self.lanes_emb = table(cfg.lanes_cap + 1)
        self.oneway_emb = table(2)
        self.stat_w = nn.Parameter(torch.randn(N_STAT_CONT, d, dtype=dtype) / d**0.5)
        self.stat_b = nn.Parameter(torch.zeros(N_STAT_CONT, d, dtype=dtype))
        self.road_w = nn.Parameter(torch.randn(N_ROAD_CONT, d, dtype=dtype) / d**0.5)
        self.road_b = nn.Parameter(torch.zeros(N_ROAD_CONT, d, dtype=dtype))
        self.state_w = nn.Parameter(torch.randn(N_STATE, d, dtype=dtype) / d**0.5)
        self.state_b = nn.Parameter(torch.zeros(N_STATE, d, dtype=dtype))
        self.trip_proj = nn.Linear((2 + N_STAT_CONT) * d, d, dtype=dtype)
        self.road_proj = nn.Linear((3 + N_ROAD_CONT) * d, d, dtype=dtype)
        self.state_proj = nn.Linear(N_STATE * d, d, dtype=dtype)

    @staticmethod
    def _affine(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        # x: [..., F] -> [..., F*d]
        out = x.unsqueeze(-1) * w + b
        return out.reshape(*x.shape[:-1], -1)

    def embed_trip(self, stat_cont: torch.Tensor, month: torch.Tensor, hour: torch.Tensor) -> torch.Tensor:
        parts = [self.month_emb[month], self.hour_emb[hour], self._affine(stat_cont, self.stat_w, self.stat_b)]
        return self.trip_proj(torch.cat(parts, dim=-1))

    def embed_roads(self, cat: torch.Tensor, cont: torch.Tensor) -> torch.Tensor:
        parts = [
            self.road_type_emb[cat[..., 0]],
            self.lanes_emb[cat[..., 1]],
            self.oneway_emb[cat[..., 2]],
            self._affine(cont, self.road_w, self.road_b),
        ]
        return self.road_proj(torch.cat(parts, dim=-1))

    def embed_states(self, cont: torch.Tensor) -> torch.Tensor:
        return self.state_proj(self._affine(cont, self.state_w, self.state_b))
