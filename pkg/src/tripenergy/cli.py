"""Command line entry point.

Exit codes: 0 success, 1 usage problems (bad flags, missing or invalid config
file), 2 data errors (unreadable datasets, unknown drivers or segments),
3 model errors (training failures, missing or corrupt checkpoints).

The store directory can be set with --store or the PEC_STORE environment
variable; the environment variable wins so deployments can pin it.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import click

from .config import VARIANTS, Config, apply_variant, load_config
from .core import DriverHistory, RoadNetwork
from .evaluation import (
    predict_split,
    report_from_predictions,
    write_report_csv,
    write_report_json,
)
from .ingestion import (
    dump_network_json,
    ingest_records,
    load_network_json,
    read_records_csv,
    read_trips_jsonl,
    write_trips_jsonl,
)
from .pipeline import global_metadata, save_model, train_global
from .prep import prep_dataset
from .service import GLOBAL_CKPT, NETWORK_FILE, TRIPS_FILE, ModelStore, StoreError, parse_departure

logger = logging.getLogger(__name__)

DEFAULT_STORE = "store"


class DataError(Exception):
    """Problems with input datasets or store contents; exit code 2."""


class ModelError(Exception):
    """Problems training, loading, or applying models; exit code 3."""


@dataclass
class CliState:
    config: Config
    seed: int
    store: Path


def _resolve_store(flag: Optional[str]) -> Path:
    env = os.environ.get("PEC_STORE")
    return Path(env if env else (flag if flag else DEFAULT_STORE))


def _load_dataset(store: Path) -> tuple[list[DriverHistory], RoadNetwork]:
    trips = store / TRIPS_FILE
    network = store / NETWORK_FILE
    if not trips.is_file() or not network.is_file():
        raise DataError(f"store {store} has no ingested dataset ({TRIPS_FILE}, {NETWORK_FILE}); run ingest first")
    try:
        return read_trips_jsonl(trips), load_network_json(network)
    except (ValueError, OSError) as exc:
        raise DataError(str(exc)) from exc


def _open_store(store: Path) -> ModelStore:
    if not (store / TRIPS_FILE).is_file() or not (store / NETWORK_FILE).is_file():
        raise DataError(f"store {store} has no ingested dataset; run ingest first")
    try:
        return ModelStore(store)
    except StoreError as exc:
        # dataset files exist, so the remaining failure modes are model-side
        raise ModelError(str(exc)) from exc
    except (ValueError, OSError) as exc:
        raise ModelError(str(exc)) from exc


@click.group(name="tripenergy")
@click.option("--config", "config_path", type=str, default=None, help="TOML config file.")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for splits, training, and selection.")
@click.option("--store", "store_flag", type=str, default=None, help=f"Store directory (default {DEFAULT_STORE!r}; PEC_STORE overrides).")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], seed: int, store_flag: Optional[str]) -> None:
    """Personalized trip energy estimation."""
    try:
        cfg = load_config(config_path)
    except FileNotFoundError as exc:
        raise click.UsageError(str(exc))
    except ValueError as exc:
        raise click.UsageError(str(exc))
    ctx.obj = CliState(config=cfg, seed=seed, store=_resolve_store(store_flag))


@cli.command()
@click.option("--records", "records_path", required=True, type=str, help="Raw GPS/energy log CSV.")
@click.option("--network", "network_path", required=True, type=str, help="Road network JSON.")
@click.pass_obj
def ingest(obj: CliState, records_path: str, network_path: str) -> None:
    """Parse raw logs into trips with labels and splits."""
    try:
        network = load_network_json(network_path)
        records = read_records_csv(records_path)
        histories = ingest_records(
            records, mode=obj.config.data.energy_mode, params=obj.config.data.vehicle, seed=obj.seed, network=network
        )
    except (ValueError, OSError) as exc:
        raise DataError(str(exc)) from exc
    if not histories:
        raise DataError("no drivers survived ingestion")
    obj.store.mkdir(parents=True, exist_ok=True)
    write_trips_jsonl(histories, obj.store / TRIPS_FILE)
    dump_network_json(network, obj.store / NETWORK_FILE)
    n_trips = sum(len(h.trips) for h in histories)
    click.echo(f"ingested {n_trips} trips from {len(histories)} drivers into {obj.store}")


@cli.command()
@click.option("--variant", default="full", type=click.Choice(VARIANTS), show_default=True)
@click.pass_obj
def train(obj: CliState, variant: str) -> None:
    """Train the shared model and write the global checkpoint."""
    histories, network = _load_dataset(obj.store)
    cfg = apply_variant(obj.config, variant)
    try:
        artifacts = train_global(histories, network, cfg, obj.seed)
        meta = global_metadata(artifacts, variant)
        digest = save_model(obj.store / GLOBAL_CKPT, artifacts.global_params, meta)
    except (ValueError, RuntimeError) as exc:
        raise ModelError(str(exc)) from exc
    click.echo(
        f"trained variant {variant} (strategy {cfg.meta.strategy}); "
        f"best epoch {artifacts.train_result.best_epoch}, val loss {artifacts.train_result.best_val:.6f}; "
        f"checkpoint {digest} at {obj.store / GLOBAL_CKPT}"
    )


@cli.command()
@click.option("--driver", "driver_id", default=None, help="Fine-tune a single driver (default: all).")
@click.pass_obj
def finetune(obj: CliState, driver_id: Optional[str]) -> None:
    """Adapt the global model per driver and store driver checkpoints."""
    store = _open_store(obj.store)
    if store.snapshot().config.meta.strategy != "meta":
        raise ModelError("the stored global checkpoint was trained with the pooled strategy; fine-tuning applies to the meta strategy only")
    targets = [driver_id] if driver_id is not None else sorted(store.histories)
    if driver_id is not None and driver_id not in store.histories:
        raise DataError(f"unknown driver {driver_id!r}")
    done = 0
    for d in targets:
        try:
            meta = store.finetune_driver(d)
        except ValueError as exc:
            logger.warning("skipping driver %s: %s", d, exc)
            continue
        except RuntimeError as exc:
            raise ModelError(str(exc)) from exc
        done += 1
        click.echo(f"driver {d}: {meta['steps']} steps, val loss {meta['val_loss']:.6f}")
    click.echo(f"fine-tuned {done}/{len(targets)} drivers")


@cli.command()
@click.option("--split", default="test", type=click.Choice(("train", "val", "test")), show_default=True)
@click.option("--out", "out_path", default=None, type=str, help="Write the report JSON here instead of stdout.")
@click.option("--csv", "csv_path", default=None, type=str, help="Also write flat metric rows as CSV.")
@click.pass_obj
def evaluate(obj: CliState, split: str, out_path: Optional[str], csv_path: Optional[str]) -> None:
    """Evaluate stored checkpoints (per-driver ones when present) on a split."""
    store = _open_store(obj.store)
    snap = store.snapshot()
    seed = int(snap.global_meta.get("seed", 0))
    histories = [store.histories[d] for d in sorted(store.histories)]
    try:
        drivers = prep_dataset(histories, store.network, snap.scalers, snap.config.model, seed)
        preds = []
        train_counts = {}
        for driver in drivers:
            params = snap.driver_params.get(driver.driver_id, snap.global_params)
            preds.extend(predict_split(snap.model, snap.scalers, driver, params, split))
            train_counts[driver.driver_id] = driver.train_count
        report = report_from_predictions(
            snap.global_meta.get("variant", "full"), split, preds, train_counts, snap.scalers, snap.config, seed
        )
    except (ValueError, RuntimeError) as exc:
        raise ModelError(str(exc)) from exc
    if csv_path:
        write_report_csv([report], csv_path)
    if out_path:
        write_report_json([report], out_path)
        click.echo(f"wrote {out_path}")
    else:
        click.echo(json.dumps(report.to_dict(), sort_keys=True, indent=1))


@cli.command()
@click.option("--driver", "driver_id", required=True, help="Driver to estimate for.")
@click.option("--route", "route_path", required=True, type=str, help="JSON file: list of segment ids.")
@click.option("--depart", required=True, type=str, help="Departure time (ISO 8601 or epoch seconds).")
@click.option("--fallback", is_flag=True, help="Use the global model for unknown drivers.")
@click.pass_obj
def estimate(obj: CliState, driver_id: str, route_path: str, depart: str, fallback: bool) -> None:
    """Estimate trip energy for a driver and route."""
    try:
        depart_ts = parse_departure(depart)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    try:
        raw = json.loads(Path(route_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"route file {route_path}: {exc}") from exc
    segment_ids = raw.get("segment_ids") if isinstance(raw, dict) else raw
    if not isinstance(segment_ids, list) or not all(isinstance(s, str) for s in segment_ids):
        raise DataError(f"route file {route_path} must hold a JSON array of segment ids")
    store = _open_store(obj.store)
    try:
        result = store.estimate(driver_id, segment_ids, depart_ts, fallback=fallback)
    except KeyError:
        raise DataError(f"unknown driver {driver_id!r} (pass --fallback to use the global model)") from None
    except LookupError as exc:
        raise DataError(f"unresolvable segment id {exc.args[0]!r}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    click.echo(json.dumps(result, sort_keys=True, indent=1))


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, type=int, show_default=True)
@click.pass_obj
def serve(obj: CliState, host: str, port: int) -> None:
    """Run the HTTP API."""
    if not (obj.store / TRIPS_FILE).is_file() or not (obj.store / NETWORK_FILE).is_file():
        raise DataError(f"store {obj.store} has no ingested dataset; run ingest first")
    try:
        from .service import build_app

        app = build_app(obj.store)
    except StoreError as exc:
        raise ModelError(str(exc)) from exc
    import uvicorn

    uvicorn.run(app, host=host, port=port, log_level="info")


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:  # --help and friends
        return int(exc.exit_code)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except ModelError as exc:
        click.echo(f"model error: {exc}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
