"""Top-K historical trip selection by route overlap and departure-time proximity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .core import SECONDS_PER_DAY, DriverHistory, Trip


@dataclass(frozen=True)
class SimilarityScore:
    trip_id: str
    route_overlap: int
    time_distance: float
    combined: float


def time_distance(target: Trip, other: Trip, mode: str = "time_of_day") -> float:
    if mode == "absolute":
        return abs(float(target.departure_time) - float(other.departure_time))
    delta = abs(target.departure_time_of_day() - other.departure_time_of_day())
    return min(delta, SECONDS_PER_DAY - delta)


def _minmax(values: list[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        # all candidates tie on this criterion; it carries no information
        return [0.0] * len(values)
    return [(v - lo) / (hi - lo) for v in values]


def score_candidates(target: Trip, candidates: Sequence[Trip], mode: str = "time_of_day") -> list[SimilarityScore]:
    """Combined similarity = normalized route overlap - normalized time distance,
    both min-max scaled over the candidate pool."""
    if not candidates:
        return []
    target_set = set(target.route)
    overlaps = [float(len(target_set & set(c.route))) for c in candidates]
    tdists = [time_distance(target, c, mode) for c in candidates]
    route_n = _minmax(overlaps)
    time_n = _minmax(tdists)
    return [
        SimilarityScore(c.trip_id, int(overlaps[i]), tdists[i], route_n[i] - time_n[i])
        for i, c in enumerate(candidates)
    ]


def rank_candidates(target: Trip, candidates: Sequence[Trip], mode: str = "time_of_day") -> list[Trip]:
    """All candidates ordered by combined score; ties break on earlier
    departure, then trip id, so training runs are reproducible."""
    scores = score_candidates(target, candidates, mode)
    order = sorted(
        range(len(candidates)),
        key=lambda i: (-scores[i].combined, candidates[i].departure_time, candidates[i].trip_id),
    )
    return [candidates[i] for i in order]


def select_top_k(target: Trip, history: DriverHistory, k: int, mode: str = "time_of_day") -> list[Trip]:
    """Up to K most similar trips from the driver's train split, target excluded."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if history.splits is not None:
        by_id = history.trips_by_id()
        pool = [by_id[tid] for tid in history.splits.train]
    else:
        pool = list(history.trips)
    pool = [t for t in pool if t.trip_id != target.trip_id]
    if not pool:
        return []
    return rank_candidates(target, pool, mode)[:k]
