"""Dataset preparation: turn Trips into padded tensor batches the model
consumes. Everything computed here is parameter-independent, so batches are
built once per (dataset, config, seed) and reused across training steps.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .config import ModelConfig
from .core import DriverHistory, RoadNetwork, SplitAssignment, Trip
from .estimator import vehicle_type_index
from .features import (
    N_STATE,
    Scalers,
    behavior_labels_raw,
    point_positions_times,
    road_raw,
    standardize_label,
    state_raw,
    trip_stat_raw,
)
from .preference import sinusoid_encoding
from .selection import rank_candidates

logger = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass
class PreppedTrip:
    """One trip reduced to model-ready numpy arrays."""

    trip_id: str
    driver_id: str
    route: tuple[str, ...]
    vtype: int
    month: int
    hour: int
    stat_cont: np.ndarray  # [5] standardized
    stat_fallback: bool
    road_cat: np.ndarray  # [n, 3] int64
    road_cont: np.ndarray  # [n, 2] standardized
    seg_len_km: np.ndarray  # [n] raw kilometers
    ref_ids: tuple[str, ...]
    y_std: Optional[float] = None
    ye_std: Optional[np.ndarray] = None  # [n, f]
    states: Optional[np.ndarray] = None  # [m, 5] standardized
    pos_time_enc: Optional[np.ndarray] = None  # [m, d] distance+time encodings

    @property
    def n(self) -> int:
        return self.road_cat.shape[0]


@dataclass
class TargetBatch:
    """Padded tensors for a set of targets sharing one reference pool."""

    ids: tuple[str, ...]
    routes: tuple[tuple[str, ...], ...]
    stat_cont: torch.Tensor  # [B, 5]
    month: torch.Tensor  # [B]
    hour: torch.Tensor  # [B]
    vtype: torch.Tensor  # [B]
    fallback: torch.Tensor  # [B] bool
    road_cat: torch.Tensor  # [B, n_max, 3]
    road_cont: torch.Tensor  # [B, n_max, 2]
    road_mask: torch.Tensor  # [B, n_max] bool
    n_lens: torch.Tensor  # [B]
    seg_len_km: torch.Tensor  # [B, n_max]
    ref_index: torch.Tensor  # [B, K_max] rows into the encoded-history table
    ref_valid: torch.Tensor  # [B, K_max] bool, >=1 True per row
    has_refs: torch.Tensor  # [B] bool
    ref_ids: tuple[tuple[str, ...], ...]
    hist_ids: tuple[str, ...]  # row i+1 of the history table is hist_ids[i]
    hist_states: Optional[torch.Tensor]  # [T+1, m_max, 5], row 0 is a dummy
    hist_enc: Optional[torch.Tensor]  # [T+1, m_max, d]
    hist_lens: Optional[torch.Tensor]  # [T+1]
    y: Optional[torch.Tensor]  # [B] standardized labels
    ye: Optional[torch.Tensor]  # [B, n_max, f]

    @property
    def size(self) -> int:
        return len(self.ids)


@dataclass
class DriverPrep:
    """All model-ready data of one driver."""

    driver_id: str
    splits: SplitAssignment
    trips: dict[str, PreppedTrip]
    train_count: int
    support: Optional[TargetBatch]
    query: Optional[TargetBatch]
    train: Optional[TargetBatch]
    val: Optional[TargetBatch]
    test: Optional[TargetBatch]


def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def _select_refs(
    target: Trip,
    pool: Sequence[Trip],
    cfg: ModelConfig,
    seed: int,
) -> tuple[str, ...]:
    usable = [t for t in pool if t.trip_id != target.trip_id]
    if not usable:
        return ()
    k = min(cfg.top_k, len(usable))
    if cfg.selection == "random":
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, _stable_int(target.driver_id), _stable_int(target.trip_id)])
        )
        ordered = sorted(usable, key=lambda t: (t.departure_time, t.trip_id))
        picks = rng.choice(len(ordered), size=k, replace=False)
        return tuple(ordered[i].trip_id for i in picks)
    ranked = rank_candidates(target, usable, cfg.time_similarity)
    return tuple(t.trip_id for t in ranked[:k])


def _positional_encodings(trip: Trip, cfg: ModelConfig) -> np.ndarray:
    p, t = point_positions_times(trip)
    p_t = torch.from_numpy(p).to(DTYPE)
    t_t = torch.from_numpy(t).to(DTYPE)
    enc = sinusoid_encoding(p_t, cfg.dist_max, cfg.dim) + sinusoid_encoding(t_t, cfg.time_max, cfg.dim)
    return enc.numpy()


def prep_trip(
    target: Trip,
    stats_pool: Sequence[Trip],
    refs: tuple[str, ...],
    network: RoadNetwork,
    sc: Scalers,
    cfg: ModelConfig,
    with_labels: bool = True,
    with_states: bool = True,
) -> PreppedTrip:
    stat_cont, month, hour, fallback = trip_stat_raw(target, stats_pool, sc, network)
    cat, cont = road_raw(target.route, network, sc, cfg)
    seg_len = np.array([network[sid].length_m / 1000.0 for sid in target.route], dtype=np.float64)
    has_traj = bool(target.trajectory)
    return PreppedTrip(
        trip_id=target.trip_id,
        driver_id=target.driver_id,
        route=target.route,
        vtype=vehicle_type_index(target.vehicle_type),
        month=month,
        hour=hour,
        stat_cont=stat_cont,
        stat_fallback=fallback,
        road_cat=cat,
        road_cont=cont,
        seg_len_km=seg_len,
        ref_ids=refs,
        y_std=(standardize_label(target.total_energy, sc) if with_labels and target.total_energy is not None else None),
        ye_std=(behavior_labels_raw(target, sc) if with_labels and has_traj else None),
        states=(state_raw(target, sc) if with_states and has_traj else None),
        pos_time_enc=(_positional_encodings(target, cfg) if with_states and has_traj else None),
    )


def build_batch(
    targets: Sequence[PreppedTrip],
    hist_pool: dict[str, PreppedTrip],
    cfg: ModelConfig,
    with_labels: bool = True,
) -> TargetBatch:
    """Assemble padded tensors. hist_pool maps trip id -> PreppedTrip for every
    trip that can serve as a reference (must carry states)."""
    if not targets:
        raise ValueError("cannot build an empty batch")
    b = len(targets)
    n_max = max(t.n for t in targets)
    k_max = max(1, max(len(t.ref_ids) for t in targets))
    f = cfg.n_behaviors

    stat = torch.zeros(b, targets[0].stat_cont.shape[0], dtype=DTYPE)
    month = torch.zeros(b, dtype=torch.int64)
    hour = torch.zeros(b, dtype=torch.int64)
    vtype = torch.zeros(b, dtype=torch.int64)
    fallback = torch.zeros(b, dtype=torch.bool)
    cat = torch.zeros(b, n_max, 3, dtype=torch.int64)
    cont = torch.zeros(b, n_max, 2, dtype=DTYPE)
    mask = torch.zeros(b, n_max, dtype=torch.bool)
    n_lens = torch.zeros(b, dtype=torch.int64)
    seg_len = torch.zeros(b, n_max, dtype=DTYPE)
    ref_index = torch.zeros(b, k_max, dtype=torch.int64)
    ref_valid = torch.zeros(b, k_max, dtype=torch.bool)
    has_refs = torch.zeros(b, dtype=torch.bool)
    y = torch.zeros(b, dtype=DTYPE)
    ye = torch.zeros(b, n_max, f, dtype=DTYPE)
    any_labels = False

    needed: list[str] = sorted({rid for t in targets for rid in t.ref_ids})
    hist_row = {rid: i + 1 for i, rid in enumerate(needed)}

    for i, t in enumerate(targets):
        stat[i] = torch.from_numpy(t.stat_cont)
        month[i], hour[i], vtype[i] = t.month, t.hour, t.vtype
        fallback[i] = t.stat_fallback
        n = t.n
        cat[i, :n] = torch.from_numpy(t.road_cat)
        cont[i, :n] = torch.from_numpy(t.road_cont)
        mask[i, :n] = True
        n_lens[i] = n
        seg_len[i, :n] = torch.from_numpy(t.seg_len_km)
        if t.ref_ids:
            idx = [hist_row[r] for r in t.ref_ids]
            ref_index[i, : len(idx)] = torch.tensor(idx, dtype=torch.int64)
            ref_valid[i, : len(idx)] = True
            has_refs[i] = True
        else:
            ref_valid[i, 0] = True  # row 0 dummy keeps softmax finite; output is masked
        if with_labels and t.y_std is not None:
            y[i] = t.y_std
            any_labels = True
        if with_labels and t.ye_std is not None:
            ye[i, :n] = torch.from_numpy(t.ye_std)

    hist_states = hist_enc = hist_lens = None
    if cfg.use_preferences:
        refs_prepped = []
        for rid in needed:
            h = hist_pool[rid]
            if h.states is None or h.pos_time_enc is None:
                raise ValueError(f"reference trip {rid} was prepped without states")
            refs_prepped.append(h)
        m_max = max((h.states.shape[0] for h in refs_prepped), default=1)
        hist_states = torch.zeros(len(needed) + 1, m_max, N_STATE, dtype=DTYPE)
        hist_enc = torch.zeros(len(needed) + 1, m_max, cfg.dim, dtype=DTYPE)
        hist_lens = torch.ones(len(needed) + 1, dtype=torch.int64)
        for row, h in enumerate(refs_prepped, start=1):
            m = h.states.shape[0]
            hist_states[row, :m] = torch.from_numpy(h.states)
            hist_enc[row, :m] = torch.from_numpy(h.pos_time_enc)
            hist_lens[row] = m

    return TargetBatch(
        ids=tuple(t.trip_id for t in targets),
        routes=tuple(t.route for t in targets),
        stat_cont=stat,
        month=month,
        hour=hour,
        vtype=vtype,
        fallback=fallback,
        road_cat=cat,
        road_cont=cont,
        road_mask=mask,
        n_lens=n_lens,
        seg_len_km=seg_len,
        ref_index=ref_index,
        ref_valid=ref_valid,
        has_refs=has_refs,
        ref_ids=tuple(t.ref_ids for t in targets),
        hist_ids=tuple(needed),
        hist_states=hist_states,
        hist_enc=hist_enc,
        hist_lens=hist_lens,
        y=y if (with_labels and any_labels) else None,
        ye=ye if (with_labels and any_labels) else None,
    )


def _usable(trip: Trip) -> bool:
    return bool(trip.route) and bool(trip.trajectory) and trip.total_energy is not None


def prep_driver(
    history: DriverHistory,
    network: RoadNetwork,
    sc: Scalers,
    cfg: ModelConfig,
    seed: int,
) -> Optional[DriverPrep]:
    """Prepare every usable trip and the per-split batches for one driver."""
    if history.splits is None:
        raise ValueError(f"driver {history.driver_id}: splits must be assigned before prep")
    by_id = history.trips_by_id()
    sp = history.splits

    def usable_ids(ids: Sequence[str]) -> list[str]:
        return [tid for tid in ids if _usable(by_id[tid])]

    train_ids = usable_ids(sp.train)
    if not train_ids:
        logger.warning("driver %s: no usable train trips; skipping", history.driver_id)
        return None
    train_trips = [by_id[tid] for tid in train_ids]

    prepped: dict[str, PreppedTrip] = {}
    for split_ids, loo in ((train_ids, True), (usable_ids(sp.val), False), (usable_ids(sp.test), False)):
        for tid in split_ids:
            target = by_id[tid]
            pool = [t for t in train_trips if not loo or t.trip_id != tid]
            refs = _select_refs(target, pool, cfg, seed)
            prepped[tid] = prep_trip(target, pool, refs, network, sc, cfg)

    hist_pool = {tid: prepped[tid] for tid in train_ids}

    def batch(ids: Sequence[str]) -> Optional[TargetBatch]:
        ids = [tid for tid in ids if tid in prepped]
        if not ids:
            return None
        return build_batch([prepped[tid] for tid in ids], hist_pool, cfg)

    return DriverPrep(
        driver_id=history.driver_id,
        splits=sp,
        trips=prepped,
        train_count=len(train_ids),
        support=batch(usable_ids(sp.support)),
        query=batch(usable_ids(sp.query)),
        train=batch(train_ids),
        val=batch(usable_ids(sp.val)),
        test=batch(usable_ids(sp.test)),
    )


def prep_dataset(
    histories: Sequence[DriverHistory],
    network: RoadNetwork,
    sc: Scalers,
    cfg: ModelConfig,
    seed: int,
) -> list[DriverPrep]:
    out = []
    for hist in sorted(histories, key=lambda h: h.driver_id):
        prep = prep_driver(hist, network, sc, cfg, seed)
        if prep is not None:
            out.append(prep)
    return out


def prep_inference_target(
    target: Trip,
    history: Optional[DriverHistory],
    network: RoadNetwork,
    sc: Scalers,
    cfg: ModelConfig,
    seed: int = 0,
) -> TargetBatch:
    """Single-target batch for estimation. The target's trajectory, if any, is
    ignored: estimates must depend only on the route, departure, and history."""
    bare = Trip(
        trip_id=target.trip_id,
        driver_id=target.driver_id,
        vehicle_type=target.vehicle_type,
        departure_time=target.departure_time,
        route=target.route,
        trajectory=(),
        total_energy=None,
    )
    train_trips: list[Trip] = []
    if history is not None and history.splits is not None:
        by_id = history.trips_by_id()
        train_trips = [by_id[tid] for tid in history.splits.train if _usable(by_id[tid])]
    elif history is not None:
        train_trips = [t for t in history.trips if _usable(t)]
    refs = _select_refs(bare, train_trips, cfg, seed)
    prepped = prep_trip(bare, train_trips, refs, network, sc, cfg, with_labels=False)
    hist_pool = {
        t.trip_id: prep_trip(t, [], (), network, sc, cfg, with_labels=False, with_states=True)
        for t in train_trips
        if t.trip_id in refs
    }
    return build_batch([prepped], hist_pool, cfg, with_labels=False)
