"""Domain types shared by every other module.

Everything here is a plain frozen dataclass plus validation and JSON-dict
round-tripping. No tensor code, no IO beyond dict conversion.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Any, Mapping, Optional, Sequence

VEHICLE_TYPES = ("ICEV", "HEV", "PHEV", "EV")

# Order of the per-point state vector. Indexes are used by features/ingestion.
STATE_FIELDS = ("time_of_day_s", "speed_ms", "accel_ms2", "energy_per_hour", "energy_per_km")
SECONDS_PER_DAY = 86_400


@dataclass(frozen=True)
class RoadSegment:
    """Static attributes of one road segment."""

    segment_id: str
    length_m: float
    lanes: int
    max_speed_kmh: float
    road_type: str
    oneway: bool
    # (lat, lon) pairs, carried opaquely for rendering; the model never reads them.
    polyline: tuple[tuple[float, float], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.segment_id,
            "length_m": self.length_m,
            "lanes": self.lanes,
            "max_speed_kmh": self.max_speed_kmh,
            "road_type": self.road_type,
            "oneway": self.oneway,
            "polyline": [list(pt) for pt in self.polyline],
        }

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "RoadSegment":
        return RoadSegment(
            segment_id=str(d["id"]),
            length_m=float(d["length_m"]),
            lanes=int(d["lanes"]),
            max_speed_kmh=float(d["max_speed_kmh"]),
            road_type=str(d["road_type"]),
            oneway=bool(d["oneway"]),
            polyline=tuple((float(p[0]), float(p[1])) for p in d.get("polyline", ())),
        )


class RoadNetwork:
    """Immutable id -> RoadSegment lookup."""

    def __init__(self, segments: Sequence[RoadSegment]):
        by_id: dict[str, RoadSegment] = {}
        for seg in segments:
            if seg.segment_id in by_id:
                raise ValueError(f"duplicate segment id {seg.segment_id!r}")
            by_id[seg.segment_id] = seg
        self._by_id = by_id

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, segment_id: str) -> bool:
        return segment_id in self._by_id

    def __getitem__(self, segment_id: str) -> RoadSegment:
        try:
            return self._by_id[segment_id]
        except KeyError:
            raise KeyError(f"unknown segment id {segment_id!r}") from None

    def segments(self) -> list[RoadSegment]:
        return [self._by_id[k] for k in sorted(self._by_id)]

    def road_types(self) -> list[str]:
        return sorted({seg.road_type for seg in self._by_id.values()})


@dataclass(frozen=True)
class TrajectoryPoint:
    """One GPS sample after trip assembly.

    position_m is cumulative distance from the trip origin, elapsed_s is
    seconds since departure, cum_energy is cumulative consumption since
    departure in label units. state follows STATE_FIELDS.
    """

    position_m: float
    elapsed_s: float
    state: tuple[float, float, float, float, float]
    cum_energy: float = 0.0
    segment_id: Optional[str] = None


@dataclass(frozen=True)
class Trip:
    """One trip: route over the network plus (optionally) its trajectory."""

    trip_id: str
    driver_id: str
    vehicle_type: str
    departure_time: int  # unix seconds
    route: tuple[str, ...]
    trajectory: tuple[TrajectoryPoint, ...] = ()
    total_energy: Optional[float] = None

    def departure_time_of_day(self) -> float:
        """Seconds since local midnight (timestamps are treated as local)."""
        return float(self.departure_time % SECONDS_PER_DAY)


@dataclass(frozen=True)
class SplitAssignment:
    """Per-driver partition of trip ids, all disjoint.

    train = support | query. val and test are held out from training
    entirely; support feeds adaptation steps, query feeds outer losses.
    """

    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    support: tuple[str, ...]
    query: tuple[str, ...]


@dataclass
class DriverHistory:
    """All trips of one driver, in departure order, plus split assignment."""

    driver_id: str
    trips: tuple[Trip, ...]
    splits: Optional[SplitAssignment] = None

    def trip(self, trip_id: str) -> Trip:
        for t in self.trips:
            if t.trip_id == trip_id:
                return t
        raise KeyError(f"driver {self.driver_id!r} has no trip {trip_id!r}")

    def trips_by_id(self) -> dict[str, Trip]:
        return {t.trip_id: t for t in self.trips}


@dataclass(frozen=True)
class Violation:
    """One validation failure, machine-readable code plus human message."""

    code: str
    message: str


def validate_route(route: Sequence[str], network: RoadNetwork) -> list[Violation]:
    out: list[Violation] = []
    if len(route) == 0:
        out.append(Violation("empty_route", "route has no segments"))
    for sid in route:
        if sid not in network:
            out.append(Violation("unknown_segment", f"route references unknown segment {sid!r}"))
    return out


def validate_trip(trip: Trip, network: RoadNetwork) -> list[Violation]:
    """Check Trip invariants; returns an empty list when the trip is sound."""
    out = list(validate_route(trip.route, network))
    if trip.vehicle_type not in VEHICLE_TYPES:
        out.append(Violation("bad_vehicle_type", f"unknown vehicle type {trip.vehicle_type!r}"))
    pts = trip.trajectory
    for i in range(1, len(pts)):
        if not pts[i].elapsed_s > pts[i - 1].elapsed_s:
            out.append(Violation("time_not_increasing", f"elapsed_s not strictly increasing at point {i}"))
            break
    for i in range(1, len(pts)):
        if pts[i].position_m < pts[i - 1].position_m:
            out.append(Violation("position_decreasing", f"position_m decreases at point {i}"))
            break
    for i in range(1, len(pts)):
        if pts[i].cum_energy < pts[i - 1].cum_energy:
            out.append(Violation("energy_decreasing", f"cum_energy decreases at point {i}"))
            break
    for i, pt in enumerate(pts):
        if pt.state[1] < 0:
            out.append(Violation("negative_speed", f"negative speed at point {i}"))
            break
    if pts and trip.total_energy is not None:
        if abs(trip.total_energy - pts[-1].cum_energy) > 1e-9 * max(1.0, abs(trip.total_energy)):
            out.append(Violation("energy_mismatch", "total_energy disagrees with final cum_energy"))
    return out


def validate_splits(history: DriverHistory) -> list[Violation]:
    out: list[Violation] = []
    sp = history.splits
    if sp is None:
        return out
    ids = [t.trip_id for t in history.trips]
    known = set(ids)
    groups = {"train": sp.train, "val": sp.val, "test": sp.test}
    seen: dict[str, str] = {}
    for name, grp in groups.items():
        for tid in grp:
            if tid not in known:
                out.append(Violation("split_unknown_trip", f"{name} split references unknown trip {tid!r}"))
            if tid in seen:
                out.append(Violation("split_overlap", f"trip {tid!r} in both {seen[tid]} and {name}"))
            seen[tid] = name
    if set(sp.support) | set(sp.query) != set(sp.train) or set(sp.support) & set(sp.query):
        out.append(Violation("support_query_mismatch", "support/query must partition train"))
    return out


# --- JSON-dict round trip -------------------------------------------------


def trip_to_dict(trip: Trip) -> dict[str, Any]:
    d = asdict(trip)
    d["route"] = list(trip.route)
    d["trajectory"] = [
        {
            "position_m": p.position_m,
            "elapsed_s": p.elapsed_s,
            "state": list(p.state),
            "cum_energy": p.cum_energy,
            "segment_id": p.segment_id,
        }
        for p in trip.trajectory
    ]
    return d


def trip_from_dict(d: Mapping[str, Any]) -> Trip:
    pts = tuple(
        TrajectoryPoint(
            position_m=float(p["position_m"]),
            elapsed_s=float(p["elapsed_s"]),
            state=tuple(float(x) for x in p["state"]),  # type: ignore[arg-type]
            cum_energy=float(p["cum_energy"]),
            segment_id=p.get("segment_id"),
        )
        for p in d.get("trajectory", ())
    )
    total = d.get("total_energy")
    return Trip(
        trip_id=str(d["trip_id"]),
        driver_id=str(d["driver_id"]),
        vehicle_type=str(d["vehicle_type"]),
        departure_time=int(d["departure_time"]),
        route=tuple(str(s) for s in d["route"]),
        trajectory=pts,
        total_energy=None if total is None else float(total),
    )


def splits_to_dict(sp: SplitAssignment) -> dict[str, Any]:
    return {k: list(v) for k, v in asdict(sp).items()}


def splits_from_dict(d: Mapping[str, Any]) -> SplitAssignment:
    return SplitAssignment(
        train=tuple(d["train"]),
        val=tuple(d["val"]),
        test=tuple(d["test"]),
        support=tuple(d["support"]),
        query=tuple(d["query"]),
    )
