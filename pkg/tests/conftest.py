"""Shared fixtures: a hand-built road network, trip builders, and a small
trained store reused by the service and CLI tests."""

from __future__ import annotations

import pytest

from tripenergy.config import Config, MetaConfig, ModelConfig
from tripenergy.core import RoadNetwork, RoadSegment, TrajectoryPoint, Trip
from tripenergy.ingestion import ingest_records, load_network_json, read_records_csv
from tripenergy.pipeline import finetune_all, global_metadata, save_model, train_global
from tripenergy.service import DRIVER_DIR, GLOBAL_CKPT, NETWORK_FILE, TRIPS_FILE
from tripenergy.synthetic import SyntheticConfig, write_dataset


def build_segment(
    segment_id: str,
    length_m: float = 500.0,
    lanes: int = 2,
    max_speed_kmh: float = 50.0,
    road_type: str = "arterial",
    oneway: bool = False,
) -> RoadSegment:
    return RoadSegment(
        segment_id=segment_id,
        length_m=length_m,
        lanes=lanes,
        max_speed_kmh=max_speed_kmh,
        road_type=road_type,
        oneway=oneway,
        polyline=((0.0, 0.0), (0.0, length_m / 111_111.0)),
    )


@pytest.fixture()
def tiny_network() -> RoadNetwork:
    return RoadNetwork(
        [
            build_segment("a", 400.0, 1, 30.0, "residential"),
            build_segment("b", 700.0, 2, 60.0, "arterial"),
            build_segment("c", 1200.0, 3, 100.0, "highway"),
            build_segment("d", 500.0, 2, 50.0, "arterial"),
        ]
    )


def build_point(
    t: float,
    position_m: float,
    speed: float = 10.0,
    accel: float = 0.0,
    eph: float = 0.0,
    epk: float = 0.0,
    cum_energy: float = 0.0,
    segment_id: str | None = None,
    tod: float | None = None,
) -> TrajectoryPoint:
    return TrajectoryPoint(
        elapsed_s=t,
        position_m=position_m,
        state=(tod if tod is not None else t % 86_400.0, speed, accel, eph, epk),
        cum_energy=cum_energy,
        segment_id=segment_id,
    )


def build_trip(
    trip_id: str = "t0",
    driver_id: str = "drv",
    vehicle_type: str = "ICEV",
    departure_time: int = 1_609_718_400 + 8 * 3600,
    route: tuple[str, ...] = ("a", "b"),
    trajectory: tuple[TrajectoryPoint, ...] = (),
    total_energy: float | None = None,
) -> Trip:
    return Trip(
        trip_id=trip_id,
        driver_id=driver_id,
        vehicle_type=vehicle_type,
        departure_time=departure_time,
        route=route,
        trajectory=trajectory,
        total_energy=total_energy,
    )


def small_config(**meta_overrides) -> Config:
    meta_kwargs = dict(epochs=2, finetune_max_steps=10, finetune_check_every=5)
    meta_kwargs.update(meta_overrides)
    return Config(
        model=ModelConfig(dim=8, heads=2, window=2, top_k=3),
        meta=MetaConfig(**meta_kwargs),
    )


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory) -> dict:
    """Small synthetic fleet, ingested once per session."""
    root = tmp_path_factory.mktemp("mini_dataset")
    records_path, network_path = write_dataset(root, SyntheticConfig(n_drivers=6, grid=5, seed=0))
    network = load_network_json(network_path)
    records = read_records_csv(records_path)
    histories = ingest_records(records, mode="obd", seed=0, network=network)
    return {
        "root": root,
        "records_path": records_path,
        "network_path": network_path,
        "network": network,
        "histories": histories,
    }


@pytest.fixture(scope="session")
def mini_store(tmp_path_factory, mini_dataset) -> dict:
    """A store directory with a tiny trained global model and one fine-tuned
    driver, for service/CLI tests."""
    from tripenergy.ingestion import dump_network_json, write_trips_jsonl

    store = tmp_path_factory.mktemp("mini_store")
    cfg = small_config()
    histories = mini_dataset["histories"]
    network = mini_dataset["network"]
    write_trips_jsonl(histories, store / TRIPS_FILE)
    dump_network_json(network, store / NETWORK_FILE)
    artifacts = train_global(histories, network, cfg, seed=0)
    digest = save_model(store / GLOBAL_CKPT, artifacts.global_params, global_metadata(artifacts))
    first = histories[0].driver_id
    tuned = finetune_all(artifacts, [first])
    ddir = store / DRIVER_DIR
    ddir.mkdir()
    meta = {
        "kind": "driver",
        "driver_id": first,
        "base_hash": digest,
        "config_hash": global_metadata(artifacts)["config_hash"],
        "config": global_metadata(artifacts)["config"],
        "scalers": artifacts.scalers.to_dict(),
        "val_loss": tuned[first].val_loss,
        "steps": tuned[first].steps,
    }
    save_model(ddir / f"{first}.ckpt", tuned[first].params, meta)
    return {
        "store": store,
        "config": cfg,
        "artifacts": artifacts,
        "digest": digest,
        "tuned_driver": first,
        "histories": histories,
        "network": network,
    }
