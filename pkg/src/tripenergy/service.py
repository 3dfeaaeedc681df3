"""HTTP API and on-disk model store.

The store directory holds the ingested dataset, the global checkpoint, and
per-driver fine-tuned checkpoints. Requests always read a consistent snapshot:
fine-tune jobs run on a single background worker and swap the snapshot only
after their checkpoint is committed to disk.
"""

from __future__ import annotations

import itertools
import json
import logging
import queue
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import torch
from pydantic import BaseModel
from torch.func import functional_call

from .checkpoint import write_bytes_atomic
from .config import Config, config_from_dict
from .core import DriverHistory, RoadNetwork, Trip
from .features import Scalers
from .ingestion import load_network_json, read_trips_jsonl
from .model import EnergyModel, output_to_estimate
from .pipeline import load_model, save_model
from .prep import prep_driver, prep_inference_target
from .training import Params, fine_tune

logger = logging.getLogger(__name__)

GLOBAL_CKPT = "global.ckpt"
DRIVER_DIR = "drivers"
INDEX_FILE = "store.json"
TRIPS_FILE = "trips.jsonl"
NETWORK_FILE = "network.json"


class StoreError(RuntimeError):
    """Raised when the store directory is missing required artifacts."""


@dataclass(frozen=True)
class StoreSnapshot:
    """Immutable view served to requests; replaced wholesale on updates."""

    version: str  # global checkpoint hash
    config: Config
    scalers: Scalers
    model: EnergyModel
    global_params: Params
    global_meta: dict[str, Any]
    driver_params: dict[str, Params]
    driver_meta: dict[str, dict[str, Any]]


class ModelStore:
    """Directory-backed store; one writer, many snapshot readers."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise StoreError(f"store directory does not exist: {self.root}")
        trips = self.root / TRIPS_FILE
        network = self.root / NETWORK_FILE
        if not trips.is_file() or not network.is_file():
            raise StoreError(f"store at {self.root} is missing {TRIPS_FILE} or {NETWORK_FILE}; run ingest first")
        self.network: RoadNetwork = load_network_json(network)
        self.histories: dict[str, DriverHistory] = {h.driver_id: h for h in read_trips_jsonl(trips)}
        self._write_lock = threading.Lock()
        self._infer_lock = threading.Lock()
        self._snapshot: Optional[StoreSnapshot] = None
        self.reload()

    # -- snapshot management --------------------------------------------------

    def reload(self) -> None:
        global_path = self.root / GLOBAL_CKPT
        if not global_path.is_file():
            raise StoreError(f"no global checkpoint at {global_path}; run train first")
        model, params, meta, digest = load_model(global_path)
        cfg = config_from_dict(meta["config"])
        scalers = Scalers.from_dict(meta["scalers"])
        driver_params: dict[str, Params] = {}
        driver_meta: dict[str, dict[str, Any]] = {}
        ddir = self.root / DRIVER_DIR
        if ddir.is_dir():
            for path in sorted(ddir.glob("*.ckpt")):
                try:
                    _, dparams, dmeta, _ = load_model(path)
                except ValueError as exc:
                    logger.warning("skipping driver checkpoint %s: %s", path.name, exc)
                    continue
                if dmeta.get("base_hash") != digest:
                    logger.warning(
                        "driver checkpoint %s was tuned from %s, current global is %s; ignoring",
                        path.name, dmeta.get("base_hash"), digest,
                    )
                    continue
                driver_params[dmeta["driver_id"]] = dparams
                driver_meta[dmeta["driver_id"]] = dmeta
        snapshot = StoreSnapshot(
            version=digest,
            config=cfg,
            scalers=scalers,
            model=model,
            global_params=params,
            global_meta=meta,
            driver_params=driver_params,
            driver_meta=driver_meta,
        )
        with self._write_lock:
            self._snapshot = snapshot
        self._update_index()

    def snapshot(self) -> StoreSnapshot:
        snap = self._snapshot
        if snap is None:
            raise StoreError("store not loaded")
        return snap

    def _update_index(self) -> None:
        snap = self._snapshot
        assert snap is not None
        index = {
            "global": {"checkpoint": GLOBAL_CKPT, "hash": snap.version, "config_hash": snap.global_meta.get("config_hash")},
            "drivers": {d: {"checkpoint": f"{DRIVER_DIR}/{d}.ckpt", "base_hash": snap.version} for d in sorted(snap.driver_params)},
            "updated_at": datetime.now(timezone.utc).isoformat(),
        }
        write_bytes_atomic(self.root / INDEX_FILE, json.dumps(index, sort_keys=True, indent=1).encode("utf-8"))

    # -- operations -------------------------------------------------------------

    def finetune_driver(self, driver_id: str) -> dict[str, Any]:
        """Fine-tune one driver from the current global params and commit."""
        snap = self.snapshot()
        history = self.histories.get(driver_id)
        if history is None:
            raise KeyError(driver_id)
        prep = prep_driver(history, self.network, snap.scalers, snap.config.model, seed=int(snap.global_meta.get("seed", 0)))
        if prep is None:
            raise ValueError(f"driver {driver_id} has no usable trips")
        with self._infer_lock:
            result = fine_tune(snap.model, snap.global_params, prep, snap.config.meta)
        meta = {
            "kind": "driver",
            "driver_id": driver_id,
            "base_hash": snap.version,
            "config_hash": snap.global_meta.get("config_hash"),
            "config": snap.global_meta["config"],
            "scalers": snap.global_meta["scalers"],
            "val_loss": result.val_loss,
            "steps": result.steps,
        }
        ddir = self.root / DRIVER_DIR
        ddir.mkdir(exist_ok=True)
        with self._write_lock:
            save_model(ddir / f"{driver_id}.ckpt", result.params, meta)
            snap2 = self.snapshot()
            new_driver_params = dict(snap2.driver_params)
            new_driver_params[driver_id] = result.params
            new_driver_meta = dict(snap2.driver_meta)
            new_driver_meta[driver_id] = meta
            self._snapshot = StoreSnapshot(
                version=snap2.version,
                config=snap2.config,
                scalers=snap2.scalers,
                model=snap2.model,
                global_params=snap2.global_params,
                global_meta=snap2.global_meta,
                driver_params=new_driver_params,
                driver_meta=new_driver_meta,
            )
        self._update_index()
        return meta

    def estimate(
        self,
        driver_id: str,
        segment_ids: list[str],
        departure_time: int,
        fallback: bool = False,
    ) -> dict[str, Any]:
        snap = self.snapshot()
        history = self.histories.get(driver_id)
        if history is None and not fallback:
            raise KeyError(driver_id)
        if not segment_ids:
            raise ValueError("route must contain at least one segment id")
        for sid in segment_ids:
            if sid not in self.network:
                raise LookupError(sid)
        vehicle_type = history.trips[0].vehicle_type if history and history.trips else "ICEV"
        trip = Trip(
            trip_id="request",
            driver_id=driver_id,
            vehicle_type=vehicle_type,
            departure_time=departure_time,
            route=tuple(segment_ids),
        )
        batch = prep_inference_target(trip, history, self.network, snap.scalers, snap.config.model)
        personal = snap.driver_params.get(driver_id)
        params = personal if personal is not None else snap.global_params
        with self._infer_lock, torch.no_grad():
            out = functional_call(snap.model, dict(params), (batch,))
        est = output_to_estimate(out, batch, snap.scalers)
        return {
            "total_energy": est.total,
            "segments": [
                {"id": s.segment_id, "predicted_energy": s.predicted_energy, "predicted_speed": s.predicted_speed}
                for s in est.per_segment
            ],
            "model_version": f"{'driver:' + driver_id + '@' if personal is not None else 'global@'}{snap.version}",
            "model": "personal" if personal is not None else "global",
            "fallback": history is None,
            "used_fallback_stats": est.used_fallback_stats,
            "reference_trip_ids": list(est.reference_trip_ids),
        }


# --- HTTP app ------------------------------------------------------------------


@dataclass
class _Job:
    job_id: str
    driver_id: str
    status: str = "queued"  # queued | running | done | failed
    error: Optional[str] = None
    result: Optional[dict] = None


class JobRunner:
    """Single worker, FIFO; at most one queued-or-running job per driver."""

    def __init__(self, store: ModelStore):
        self.store = store
        self.jobs: dict[str, _Job] = {}
        self.active_drivers: set[str] = set()
        self._lock = threading.Lock()
        self._queue: "queue.Queue[Optional[str]]" = queue.Queue()
        self._counter = itertools.count(1)
        self._thread = threading.Thread(target=self._run, name="finetune-worker", daemon=True)
        self._thread.start()

    def submit(self, driver_id: str) -> _Job:
        with self._lock:
            if driver_id in self.active_drivers:
                raise RuntimeError(f"fine-tune already running for driver {driver_id}")
            job = _Job(job_id=f"job-{next(self._counter)}", driver_id=driver_id)
            self.jobs[job.job_id] = job
            self.active_drivers.add(driver_id)
        self._queue.put(job.job_id)
        return job

    def get(self, job_id: str) -> Optional[_Job]:
        with self._lock:
            return self.jobs.get(job_id)

    def _run(self) -> None:
        while True:
            job_id = self._queue.get()
            if job_id is None:
                return
            job = self.jobs[job_id]
            job.status = "running"
            try:
                job.result = self.store.finetune_driver(job.driver_id)
                job.status = "done"
            except Exception as exc:  # noqa: BLE001 - job isolation boundary
                job.status = "failed"
                job.error = str(exc)
                logger.exception("fine-tune job %s failed", job_id)
            finally:
                with self._lock:
                    self.active_drivers.discard(job.driver_id)

    def shutdown(self) -> None:
        self._queue.put(None)


def parse_departure(value: Any) -> int:
    """Epoch seconds (number or numeric string) or an ISO 8601 datetime;
    naive datetimes are taken as UTC."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return int(value)
    text = str(value).strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text)
    except ValueError:
        raise ValueError(f"unparseable departure_time {value!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


class EstimateRequest(BaseModel):
    driver_id: str
    segment_ids: list[str]
    departure_time: int | str
    fallback: bool = False


def build_app(store_dir: str | Path):
    """Create the FastAPI app bound to a store directory."""
    from fastapi import FastAPI, HTTPException
    from fastapi.middleware.cors import CORSMiddleware
    from fastapi.responses import JSONResponse

    store = ModelStore(store_dir)
    runner = JobRunner(store)
    app = FastAPI(title="tripenergy", docs_url=None, redoc_url=None)
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"])
    app.state.store = store
    app.state.runner = runner

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "model_version": store.snapshot().version}

    @app.get("/network")
    def network() -> JSONResponse:
        return JSONResponse([seg.to_dict() for seg in store.network.segments()])

    @app.post("/estimate")
    def estimate(req: EstimateRequest, fallback: bool = False) -> dict:
        try:
            depart = parse_departure(req.departure_time)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        try:
            return store.estimate(req.driver_id, req.segment_ids, depart, fallback=req.fallback or fallback)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown driver {req.driver_id!r}")
        except LookupError as exc:
            raise HTTPException(status_code=422, detail=f"unresolvable segment id {exc.args[0]!r}")
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.get("/drivers/{driver_id}/model")
    def driver_model(driver_id: str) -> dict:
        snap = store.snapshot()
        if driver_id not in store.histories:
            raise HTTPException(status_code=404, detail=f"unknown driver {driver_id!r}")
        meta = snap.driver_meta.get(driver_id)
        if meta is None:
            return {"model": "global", "model_version": f"global@{snap.version}", "config_hash": snap.global_meta.get("config_hash")}
        return {
            "model": "personal",
            "model_version": f"driver:{driver_id}@{snap.version}",
            "base_hash": meta.get("base_hash"),
            "val_loss": meta.get("val_loss"),
            "steps": meta.get("steps"),
        }

    @app.post("/drivers/{driver_id}/finetune", status_code=202)
    def start_finetune(driver_id: str) -> dict:
        if driver_id not in store.histories:
            raise HTTPException(status_code=404, detail=f"unknown driver {driver_id!r}")
        try:
            job = runner.submit(driver_id)
        except RuntimeError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"job_id": job.job_id, "status": job.status}

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str) -> dict:
        job = runner.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id!r}")
        return {"job_id": job.job_id, "driver_id": job.driver_id, "status": job.status, "error": job.error}

    return app
