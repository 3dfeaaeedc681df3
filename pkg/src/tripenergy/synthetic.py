"""Synthetic fleet generator.

Produces a grid road network and a population of drivers with latent traits:
vehicle efficiency, a per-road-type driving style (a driver can be pushy on
highways yet gentle on residential streets), how much congestion winds them
up, preferred departure hours, and habitual routes. Per-road energy intensity
depends on road type, hour-of-day congestion, and month, so a per-driver
constant-rate baseline is beatable by a model that reads routes, departure
times, and history; the road-conditional and hour-conditional traits are only
recoverable from behavior on comparable past trips, not from trip-level
averages. A configurable share of drivers get few trips to exercise the
long-tail path.

Output is a raw record CSV plus a network JSON in the ingestion schema; the
rest of the pipeline treats generated data exactly like field data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import RoadNetwork, RoadSegment

BASE_EPOCH = 1_609_718_400  # 2021-01-04 00:00 UTC, a Monday

VEHICLE_MIX = (("ICEV", 0.55), ("HEV", 0.20), ("PHEV", 0.12), ("EV", 0.13))
BASE_EPK = {"ICEV": 0.90, "HEV": 0.60, "PHEV": 0.45, "EV": 0.20}  # units/km

ROAD_TYPE_EPK = {"residential": 1.30, "arterial": 1.00, "highway": 0.78}
ROAD_TYPE_FREE_SPEED = {"residential": 0.80, "arterial": 0.85, "highway": 0.92}

MONTH_EPK = (1.18, 1.15, 1.08, 1.00, 0.96, 0.94, 0.95, 0.96, 0.98, 1.04, 1.10, 1.16)


@dataclass(frozen=True)
class SyntheticConfig:
    n_drivers: int = 35
    grid: int = 7
    seed: int = 0
    longtail_fraction: float = 0.3
    point_interval_s: float = 5.0


RUSH_HOURS = (7, 8, 9, 16, 17, 18, 19)

ROAD_TYPES = ("residential", "arterial", "highway")


def _congestion(hour: int, road_type: str) -> tuple[float, float]:
    """(speed factor, energy factor) for the hour of day."""
    rush = hour in RUSH_HOURS
    if rush:
        return (0.75, 1.12) if road_type == "highway" else (0.58, 1.28)
    if 22 <= hour or hour <= 5:
        return 1.0, 0.92
    return 0.88, 1.0


def build_network(cfg: SyntheticConfig) -> RoadNetwork:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    g = cfg.grid
    lat0, lon0, dlat, dlon = 42.20, -83.80, 0.009, 0.011

    def node(r: int, c: int) -> tuple[float, float]:
        return (lat0 + r * dlat, lon0 + c * dlon)

    def classify(fixed: int) -> str:
        if fixed == 0 or fixed == g - 1:
            return "highway"
        if fixed == g // 2:
            return "arterial"
        return "residential"

    segments = []
    length_base = {"highway": 1200.0, "arterial": 700.0, "residential": 400.0}
    speed_base = {"highway": 100.0, "arterial": 60.0, "residential": 35.0}
    lanes_base = {"highway": 3, "arterial": 2, "residential": 1}
    for r in range(g):
        for c in range(g - 1):
            kind = classify(r)
            segments.append(("h", r, c, kind, node(r, c), node(r, c + 1)))
    for c in range(g):
        for r in range(g - 1):
            kind = classify(c)
            segments.append(("v", r, c, kind, node(r, c), node(r + 1, c)))

    out = []
    for axis, r, c, kind, a, b in segments:
        length = length_base[kind] * float(rng.uniform(0.85, 1.15))
        speed = speed_base[kind] * float(rng.uniform(0.95, 1.05))
        oneway = kind == "residential" and rng.uniform() < 0.1
        out.append(
            RoadSegment(
                segment_id=f"{axis}{r}-{c}",
                length_m=round(length, 1),
                lanes=lanes_base[kind],
                max_speed_kmh=round(speed, 1),
                road_type=kind,
                oneway=bool(oneway),
                polyline=(a, b),
            )
        )
    return RoadNetwork(out)


def _grid_edges(cfg: SyntheticConfig) -> dict[tuple[tuple[int, int], tuple[int, int]], str]:
    g = cfg.grid
    edges = {}
    for r in range(g):
        for c in range(g - 1):
            edges[((r, c), (r, c + 1))] = f"h{r}-{c}"
    for c in range(g):
        for r in range(g - 1):
            edges[((r, c), (r + 1, c))] = f"v{r}-{c}"
    return edges


def _shortest_path(start: tuple[int, int], goal: tuple[int, int], g: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """BFS path on the grid; neighbor order is shuffled once per call so
    different drivers settle on different (but fixed) habitual paths."""
    from collections import deque

    offsets = [(0, 1), (0, -1), (1, 0), (-1, 0)]
    rng.shuffle(offsets)
    prev: dict[tuple[int, int], tuple[int, int]] = {}
    seen = {start}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        if cur == goal:
            break
        for dr, dc in offsets:
            nxt = (cur[0] + dr, cur[1] + dc)
            if 0 <= nxt[0] < g and 0 <= nxt[1] < g and nxt not in seen:
                seen.add(nxt)
                prev[nxt] = cur
                queue.append(nxt)
    path = [goal]
    while path[-1] != start:
        path.append(prev[path[-1]])
    return path[::-1]


def _nodes_to_segments(path: list[tuple[int, int]], edges: dict) -> list[tuple[str, tuple[int, int], tuple[int, int]]]:
    segs = []
    for a, b in zip(path, path[1:]):
        sid = edges.get((a, b)) or edges.get((b, a))
        assert sid is not None
        segs.append((sid, a, b))
    return segs


@dataclass
class _Driver:
    driver_id: str
    vehicle_type: str
    epk_personal: float
    style: dict[str, float]  # road type -> pace/energy multiplier
    rush_tension: float  # extra energy multiplier when stuck in rush hour
    preferred_hours: tuple[int, ...]
    routes: list[list[tuple[str, tuple[int, int], tuple[int, int]]]]
    # energy multiplier per habitual route: grades, signal timing, parking
    # hunts, and similar route-specific costs that road attributes never show.
    # Only past trips on the same route reveal it.
    route_bias: tuple[float, ...]
    n_trips: int


def _make_drivers(cfg: SyntheticConfig, network: RoadNetwork) -> list[_Driver]:
    g = cfg.grid
    edges = _grid_edges(cfg)
    drivers = []
    n_longtail = int(round(cfg.n_drivers * cfg.longtail_fraction))
    for i in range(cfg.n_drivers):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 202, i]))
        vt = rng.choice([v for v, _ in VEHICLE_MIX], p=[p for _, p in VEHICLE_MIX])
        home = (int(rng.integers(0, g)), int(rng.integers(0, g)))
        n_dest = int(rng.integers(3, 6))
        dests = []
        while len(dests) < n_dest:
            cand = (int(rng.integers(0, g)), int(rng.integers(0, g)))
            if abs(cand[0] - home[0]) + abs(cand[1] - home[1]) >= 3 and cand not in dests:
                dests.append(cand)
        routes = [_nodes_to_segments(_shortest_path(home, d, g, rng), edges) for d in dests]
        longtail = i >= cfg.n_drivers - n_longtail
        n_trips = int(rng.integers(6, 13)) if longtail else int(rng.integers(18, 31))
        drivers.append(
            _Driver(
                driver_id=f"d{i:03d}",
                vehicle_type=str(vt),
                epk_personal=float(rng.uniform(0.62, 1.5)),
                style={rt: float(rng.uniform(0.8, 1.25)) for rt in ROAD_TYPES},
                rush_tension=float(rng.uniform(0.95, 1.2)),
                preferred_hours=tuple(int(h) for h in rng.choice([7, 8, 9, 12, 16, 17, 18, 20], size=2, replace=False)),
                routes=routes,
                route_bias=tuple(float(rng.uniform(0.72, 1.32)) for _ in routes),
                n_trips=n_trips,
            )
        )
    return drivers


def _trip_records(
    driver: _Driver,
    route: list[tuple[str, tuple[int, int], tuple[int, int]]],
    depart_ts: int,
    month_idx: int,
    hour: int,
    route_bias: float,
    network: RoadNetwork,
    rng: np.random.Generator,
    cfg: SyntheticConfig,
) -> list[dict]:
    rows = []
    t = float(depart_ts)
    prev_speed = None
    tension = driver.rush_tension if hour in RUSH_HOURS else 1.0
    for sid, a, b in route:
        seg = network[sid]
        speed_f, energy_f = _congestion(hour, seg.road_type)
        style = driver.style[seg.road_type]
        target = (
            seg.max_speed_kmh / 3.6
            * ROAD_TYPE_FREE_SPEED[seg.road_type]
            * speed_f
            * style
        )
        duration = seg.length_m / target
        n_pts = max(2, int(round(duration / cfg.point_interval_s)))
        dt = duration / n_pts
        (lat_a, lon_a), (lat_b, lon_b) = seg.polyline
        for j in range(n_pts):
            frac = j / n_pts
            speed = max(0.5, target * (1.0 + 0.08 * float(rng.standard_normal())))
            accel = 0.0 if prev_speed is None else (speed - prev_speed) / dt
            prev_speed = speed
            epk = (
                BASE_EPK[driver.vehicle_type]
                * driver.epk_personal
                * ROAD_TYPE_EPK[seg.road_type]
                * energy_f
                * MONTH_EPK[month_idx]
                * style
                * tension
                * route_bias
                * (1.0 + 0.05 * float(rng.standard_normal()))
            )
            rate = max(0.0, epk * speed / 1000.0 * (1.0 + 0.25 * max(0.0, accel)))
            rows.append(
                {
                    "driver_id": driver.driver_id,
                    "timestamp": int(t),
                    "lat": round(lat_a + (lat_b - lat_a) * frac, 6),
                    "lon": round(lon_a + (lon_b - lon_a) * frac, 6),
                    "speed": round(speed, 3),
                    "energy_rate": round(rate, 8),
                    "segment_id": sid,
                    "vehicle_type": driver.vehicle_type,
                }
            )
            t += dt
    return rows


def generate_records(cfg: SyntheticConfig, network: RoadNetwork) -> list[dict]:
    drivers = _make_drivers(cfg, network)
    rows: list[dict] = []
    for driver in drivers:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 303, int(driver.driver_id[1:])]))
        day = 0.0
        for k in range(driver.n_trips):
            day += float(rng.uniform(0.9, 2.4))
            j = int(rng.integers(0, len(driver.routes)))
            route = driver.routes[j]
            if rng.uniform() < 0.72:
                hour = int(driver.preferred_hours[int(rng.integers(0, 2))] + rng.integers(-1, 2)) % 24
            else:
                hour = int(rng.integers(6, 23))
                if rng.uniform() < 0.5 and len(route) > 3:
                    route = route[: int(rng.integers(3, len(route)))]
            if k % 2 == 1:
                route = [(sid, b, a) for sid, a, b in reversed(route)]
            depart = BASE_EPOCH + int(day * 86_400) + hour * 3600 + int(rng.integers(0, 1800))
            month_idx = _month_of(depart)
            rows.extend(
                _trip_records(driver, route, depart, month_idx, hour, driver.route_bias[j], network, rng, cfg)
            )
    rows.sort(key=lambda r: (r["driver_id"], r["timestamp"]))
    return rows


def _month_of(ts: int) -> int:
    from datetime import datetime, timezone

    return datetime.fromtimestamp(ts, tz=timezone.utc).month - 1


def write_dataset(out_dir: str | Path, cfg: SyntheticConfig) -> tuple[Path, Path]:
    """Write records CSV + network JSON; returns their paths."""
    from .ingestion import dump_network_json

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    network = build_network(cfg)
    net_path = out_dir / "network.json"
    dump_network_json(network, net_path)
    csv_path = out_dir / "records.csv"
    rows = generate_records(cfg, network)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["driver_id", "timestamp", "lat", "lon", "speed", "energy_rate", "segment_id", "vehicle_type"],
        )
        writer.writeheader()
        writer.writerows(rows)
    return csv_path, net_path
