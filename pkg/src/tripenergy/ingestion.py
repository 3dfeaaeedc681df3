"""Raw log ingestion: CSV parsing, trip splitting, energy labeling, per-road
behavior labels, and train/val/test/support/query splits.

All functions here are pure per-driver transforms; nothing touches model code.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    DriverHistory,
    RoadNetwork,
    RoadSegment,
    SplitAssignment,
    Trip,
    TrajectoryPoint,
    splits_from_dict,
    splits_to_dict,
    trip_from_dict,
    trip_to_dict,
)

logger = logging.getLogger(__name__)

TRIP_GAP_S = 300.0  # a strictly larger gap starts a new trip

CSV_COLUMNS = ("driver_id", "timestamp", "lat", "lon", "speed", "energy_rate", "segment_id", "vehicle_type")
REQUIRED_COLUMNS = ("driver_id", "timestamp", "lat", "lon", "speed", "vehicle_type")

# Below this interval distance the energy-per-km ratio is unbounded; treat as 0.
MIN_INTERVAL_DIST_M = 1.0


@dataclass(frozen=True)
class RawLogRecord:
    """One row of the raw GPS/OBD log."""

    driver_id: str
    timestamp: float
    lat: float
    lon: float
    speed: float
    energy_rate: Optional[float]
    segment_id: Optional[str]
    vehicle_type: str


@dataclass(frozen=True)
class VehicleParams:
    """Constants for the mechanical (no-OBD) energy labeling mode."""

    mass_kg: float = 1500.0
    drag_coefficient: float = 0.30
    frontal_area_m2: float = 2.2
    rolling_resistance: float = 0.01
    air_density: float = 1.2
    gravity: float = 9.81

    def __post_init__(self) -> None:
        for name in ("mass_kg", "drag_coefficient", "frontal_area_m2", "rolling_resistance", "air_density", "gravity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"vehicle param {name} must be strictly positive")


@dataclass(frozen=True)
class BehaviorVector:
    """Per-segment behavior label: mean speed, mean accel, energy/hour, energy/km."""

    segment_id: str
    values: tuple[float, float, float, float]
    imputed: bool
    point_count: int


def _parse_timestamp(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        pass
    from datetime import datetime

    try:
        return datetime.fromisoformat(raw).timestamp()
    except ValueError:
        raise ValueError(f"unparseable timestamp {raw!r}") from None


def read_records_csv(path: str | Path) -> list[RawLogRecord]:
    """Parse the raw log CSV. Optional columns may be absent or empty."""
    path = Path(path)
    records: list[RawLogRecord] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ValueError(f"{path}: missing required columns {missing}")
        unknown = [c for c in header if c not in CSV_COLUMNS]
        if unknown:
            raise ValueError(f"{path}: unknown columns {unknown}")
        for lineno, row in enumerate(reader, start=2):
            rate_raw = (row.get("energy_rate") or "").strip()
            seg_raw = (row.get("segment_id") or "").strip()
            try:
                records.append(
                    RawLogRecord(
                        driver_id=row["driver_id"].strip(),
                        timestamp=_parse_timestamp(row["timestamp"].strip()),
                        lat=float(row["lat"]),
                        lon=float(row["lon"]),
                        speed=float(row["speed"]),
                        energy_rate=float(rate_raw) if rate_raw else None,
                        segment_id=seg_raw or None,
                        vehicle_type=row["vehicle_type"].strip(),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record: {exc}") from None
    return records


def group_by_driver(records: Sequence[RawLogRecord]) -> dict[str, list[RawLogRecord]]:
    out: dict[str, list[RawLogRecord]] = {}
    for rec in records:
        out.setdefault(rec.driver_id, []).append(rec)
    return out


def split_trips(stream: Sequence[RawLogRecord]) -> list[tuple[str, list[RawLogRecord]]]:
    """Split one driver's sorted record stream into trips at gaps > 300 s.

    Returns (trip_id, records) pairs; trips with fewer than 2 points are
    dropped. Trip ids are derived from driver id and departure timestamp so
    re-ingesting the same data yields the same ids.
    """
    if not stream:
        return []
    driver = stream[0].driver_id
    for i in range(1, len(stream)):
        if stream[i].driver_id != driver:
            raise ValueError(f"mixed driver ids in stream at index {i}")
        if stream[i].timestamp <= stream[i - 1].timestamp:
            raise ValueError(f"records not strictly sorted by timestamp: inversion at index {i}")

    groups: list[list[RawLogRecord]] = [[stream[0]]]
    for prev, cur in zip(stream, stream[1:]):
        if cur.timestamp - prev.timestamp > TRIP_GAP_S:
            groups.append([])
        groups[-1].append(cur)

    out: list[tuple[str, list[RawLogRecord]]] = []
    for grp in groups:
        if len(grp) < 2:
            logger.debug("dropping single-point trip for driver %s at t=%s", driver, grp[0].timestamp)
            continue
        trip_id = f"{driver}-{int(grp[0].timestamp)}"
        out.append((trip_id, grp))
    return out


def _route_from_records(records: Sequence[RawLogRecord]) -> tuple[str, ...]:
    route: list[str] = []
    for rec in records:
        sid = rec.segment_id
        if sid is not None and (not route or route[-1] != sid):
            route.append(sid)
    return tuple(route)


def build_trip(trip_id: str, records: Sequence[RawLogRecord]) -> Trip:
    """Assemble an unlabeled Trip: positions from speed integration, rebased times."""
    t0 = records[0].timestamp
    positions = [0.0]
    for prev, cur in zip(records, records[1:]):
        dt = cur.timestamp - prev.timestamp
        positions.append(positions[-1] + 0.5 * (prev.speed + cur.speed) * dt)
    pts = tuple(
        TrajectoryPoint(
            position_m=positions[i],
            elapsed_s=rec.timestamp - t0,
            state=(rec.timestamp % 86_400, rec.speed, 0.0, 0.0, 0.0),
            cum_energy=0.0,
            segment_id=rec.segment_id,
        )
        for i, rec in enumerate(records)
    )
    return Trip(
        trip_id=trip_id,
        driver_id=records[0].driver_id,
        vehicle_type=records[0].vehicle_type,
        departure_time=int(t0),
        route=_route_from_records(records),
        trajectory=pts,
        total_energy=None,
    )


def _mechanical_rate(speed: float, accel: float, p: VehicleParams) -> float:
    """Traction power in watts at a given speed/acceleration, clamped at zero."""
    force = p.mass_kg * accel + 0.5 * p.air_density * p.drag_coefficient * p.frontal_area_m2 * speed**2 + p.mass_kg * p.gravity * p.rolling_resistance
    return max(0.0, force * speed)


def label_energy(
    trip: Trip,
    mode: str = "obd",
    params: VehicleParams = VehicleParams(),
    rates: Optional[Sequence[Optional[float]]] = None,
) -> Trip:
    """Fill cumulative energy and the derived per-point state channels.

    obd mode integrates measured rates (units/s) by the trapezoid rule over
    inter-point intervals; mechanical mode accumulates per-interval energy
    max(0, traction power at the interval mean speed) * dt, with the interval
    acceleration taken as the speed difference quotient.

    `rates` carries the measured energy rates aligned with the trajectory
    (obd mode only; they are not stored on Trip).
    """
    pts = trip.trajectory
    if not pts:
        raise ValueError(f"trip {trip.trip_id}: labeling requires a trajectory")
    if mode not in ("obd", "mechanical"):
        raise ValueError(f"unknown labeling mode {mode!r}")

    if mode == "obd":
        if rates is None or len(rates) != len(pts):
            raise ValueError(f"trip {trip.trip_id}: obd mode requires one measured rate per point")
        for i, r in enumerate(rates):
            if r is None:
                raise ValueError(f"trip {trip.trip_id}: point {i} has no measured energy rate")

    cum = [0.0]
    for i in range(1, len(pts)):
        dt = pts[i].elapsed_s - pts[i - 1].elapsed_s
        if mode == "obd":
            assert rates is not None
            interval = 0.5 * (float(rates[i - 1]) + float(rates[i])) * dt  # type: ignore[arg-type]
        else:
            v_mean = 0.5 * (pts[i - 1].state[1] + pts[i].state[1])
            accel = (pts[i].state[1] - pts[i - 1].state[1]) / dt
            interval = _mechanical_rate(v_mean, accel, params) * dt
        cum.append(cum[-1] + interval)

    new_pts = []
    for i, pt in enumerate(pts):
        if i == 0:
            accel = eph = epk = 0.0
        else:
            dt = pt.elapsed_s - pts[i - 1].elapsed_s
            de = cum[i] - cum[i - 1]
            dp = pt.position_m - pts[i - 1].position_m
            accel = (pt.state[1] - pts[i - 1].state[1]) / dt
            eph = de / dt * 3600.0
            epk = de / dp * 1000.0 if dp >= MIN_INTERVAL_DIST_M else 0.0
        new_pts.append(
            TrajectoryPoint(
                position_m=pt.position_m,
                elapsed_s=pt.elapsed_s,
                state=(pt.state[0], pt.state[1], accel, eph, epk),
                cum_energy=cum[i],
                segment_id=pt.segment_id,
            )
        )
    return Trip(
        trip_id=trip.trip_id,
        driver_id=trip.driver_id,
        vehicle_type=trip.vehicle_type,
        departure_time=trip.departure_time,
        route=trip.route,
        trajectory=tuple(new_pts),
        total_energy=cum[-1],
    )


def _assign_points(trip: Trip) -> list[int]:
    """Map each trajectory point to a route position (-1 when unassignable).

    Points carry matched segment ids; the route may repeat a segment, so a
    cursor walks the route forward and only ever advances.
    """
    assignment: list[int] = []
    cursor = 0
    route = trip.route
    for pt in trip.trajectory:
        sid = pt.segment_id
        if sid is None or not route:
            assignment.append(-1)
            continue
        if route[cursor] == sid:
            assignment.append(cursor)
            continue
        nxt = None
        for j in range(cursor + 1, len(route)):
            if route[j] == sid:
                nxt = j
                break
        if nxt is None:
            assignment.append(-1)
        else:
            cursor = nxt
            assignment.append(cursor)
    return assignment


def trip_point_stats(trip: Trip) -> tuple[float, float, float, float]:
    """Trip-level behavior stats: per-point means of speed/accel/eph/epk."""
    pts = trip.trajectory
    if not pts:
        raise ValueError(f"trip {trip.trip_id}: stats require a trajectory")
    arr = np.array([[p.state[1], p.state[2], p.state[3], p.state[4]] for p in pts], dtype=np.float64)
    return tuple(arr.mean(axis=0))  # type: ignore[return-value]


def extract_road_labels(trip: Trip) -> list[BehaviorVector]:
    """Per-segment behavior labels over the points assigned to each segment.

    Segments with no assigned points get the trip-level means, flagged imputed.
    """
    if not trip.trajectory:
        raise ValueError(f"trip {trip.trip_id}: labels require trajectory")
    assignment = _assign_points(trip)
    trip_means = trip_point_stats(trip)
    per_pos: dict[int, list[tuple[float, float, float, float]]] = {}
    for pt, pos in zip(trip.trajectory, assignment):
        if pos >= 0:
            per_pos.setdefault(pos, []).append((pt.state[1], pt.state[2], pt.state[3], pt.state[4]))
    out: list[BehaviorVector] = []
    for i, sid in enumerate(trip.route):
        rows = per_pos.get(i)
        if rows:
            arr = np.array(rows, dtype=np.float64)
            out.append(BehaviorVector(sid, tuple(arr.mean(axis=0)), imputed=False, point_count=len(rows)))
        else:
            out.append(BehaviorVector(sid, trip_means, imputed=True, point_count=0))
    return out


def attribute_energy(trip: Trip) -> dict[Optional[str], float]:
    """Split total energy across segments by point assignment.

    Each inter-point interval's energy goes to the segment of its right
    endpoint; intervals whose endpoint is unassigned accumulate under None.
    Values sum to total_energy exactly up to float addition order.
    """
    assignment = _assign_points(trip)
    out: dict[Optional[str], float] = {}
    pts = trip.trajectory
    for i in range(1, len(pts)):
        de = pts[i].cum_energy - pts[i - 1].cum_energy
        pos = assignment[i]
        key = trip.route[pos] if pos >= 0 else None
        out[key] = out.get(key, 0.0) + de
    return out


def _driver_seed(seed: int, driver_id: str) -> np.random.Generator:
    digest = hashlib.sha256(driver_id.encode("utf-8")).digest()
    driver_int = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, driver_int]))


def make_splits(history: DriverHistory, seed: int) -> DriverHistory:
    """Assign 10% val / 20% test (floored) per driver; support is 10% of train
    (at least 1 trip), query the rest. Deterministic in (seed, driver_id)."""
    trips = sorted(history.trips, key=lambda t: (t.departure_time, t.trip_id))
    ids = [t.trip_id for t in trips]
    m = len(ids)
    if m == 0:
        raise ValueError(f"driver {history.driver_id}: no trips to split")
    rng = _driver_seed(seed, history.driver_id)
    perm = rng.permutation(m)
    shuffled = [ids[i] for i in perm]
    n_val = m // 10
    n_test = (2 * m) // 10
    val = tuple(sorted(shuffled[:n_val]))
    test = tuple(sorted(shuffled[n_val : n_val + n_test]))
    train_shuffled = shuffled[n_val + n_test :]
    n_support = max(1, len(train_shuffled) // 10) if train_shuffled else 0
    support = tuple(sorted(train_shuffled[:n_support]))
    query = tuple(sorted(train_shuffled[n_support:]))
    train = tuple(sorted(train_shuffled))
    return DriverHistory(
        driver_id=history.driver_id,
        trips=tuple(trips),
        splits=SplitAssignment(train=train, val=val, test=test, support=support, query=query),
    )


# --- pipeline + file formats -----------------------------------------------


def ingest_records(
    records: Sequence[RawLogRecord],
    mode: str = "obd",
    params: VehicleParams = VehicleParams(),
    seed: int = 0,
    network: Optional[RoadNetwork] = None,
) -> list[DriverHistory]:
    """Full ingestion: group, sort, split, label, and assign splits.

    Trips that end up without a route (no segment ids in the log) are kept in
    the history but will be filtered out by dataset assembly; drivers whose
    every trip lacks a route are dropped here. When a network is given, trips
    whose route references a segment the network does not know lose their
    route (they keep their trajectory and label but cannot be model inputs).
    """
    histories: list[DriverHistory] = []
    grouped = group_by_driver(records)
    for driver_id in sorted(grouped):
        stream = sorted(grouped[driver_id], key=lambda r: r.timestamp)
        trips: list[Trip] = []
        for trip_id, grp in split_trips(stream):
            trip = build_trip(trip_id, grp)
            if network is not None and any(sid not in network for sid in trip.route):
                bad = next(sid for sid in trip.route if sid not in network)
                logger.warning("trip %s references unknown segment %r; dropping its route", trip_id, bad)
                trip = replace(trip, route=())
            if mode == "obd":
                rates = [r.energy_rate for r in grp]
                if any(r is None for r in rates):
                    first_bad = next(i for i, r in enumerate(rates) if r is None)
                    raise ValueError(f"trip {trip_id}: obd mode but point {first_bad} has empty energy_rate")
                trip = label_energy(trip, "obd", params, rates=rates)
            else:
                trip = label_energy(trip, "mechanical", params)
            trips.append(trip)
        if not trips:
            logger.warning("driver %s: no usable trips after splitting", driver_id)
            continue
        if not any(t.route for t in trips):
            logger.warning("driver %s: no trips carry segment ids; dropping driver", driver_id)
            continue
        histories.append(make_splits(DriverHistory(driver_id, tuple(trips)), seed))
    return histories


def load_network_json(path: str | Path) -> RoadNetwork:
    with Path(path).open(encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError(f"{path}: road network must be a JSON array")
    return RoadNetwork([RoadSegment.from_dict(d) for d in data])


def dump_network_json(network: RoadNetwork, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump([seg.to_dict() for seg in network.segments()], fh)


def write_trips_jsonl(histories: Iterable[DriverHistory], path: str | Path) -> None:
    """One Trip per line; split assignments ride along as a sidecar line type."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for hist in histories:
            for trip in hist.trips:
                fh.write(json.dumps({"kind": "trip", **trip_to_dict(trip)}) + "\n")
            if hist.splits is not None:
                fh.write(json.dumps({"kind": "splits", "driver_id": hist.driver_id, **splits_to_dict(hist.splits)}) + "\n")


def read_trips_jsonl(path: str | Path) -> list[DriverHistory]:
    trips_by_driver: dict[str, list[Trip]] = {}
    splits_by_driver: dict[str, SplitAssignment] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: bad JSON: {exc}") from None
            kind = d.get("kind", "trip")
            if kind == "trip":
                trip = trip_from_dict(d)
                trips_by_driver.setdefault(trip.driver_id, []).append(trip)
            elif kind == "splits":
                splits_by_driver[d["driver_id"]] = splits_from_dict(d)
            else:
                raise ValueError(f"{path}:{lineno}: unknown line kind {kind!r}")
    out = []
    for driver_id in sorted(trips_by_driver):
        trips = tuple(sorted(trips_by_driver[driver_id], key=lambda t: (t.departure_time, t.trip_id)))
        out.append(DriverHistory(driver_id, trips, splits_by_driver.get(driver_id)))
    return out
