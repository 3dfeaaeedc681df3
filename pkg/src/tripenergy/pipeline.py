"""End-to-end glue: dataset preparation, global training, per-driver
fine-tuning, and checkpoint persistence. CLI, service, and evaluation all go
through these functions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch

from .checkpoint import load_checkpoint, save_checkpoint, write_bytes_atomic
from .config import Config, config_dict, config_from_dict, config_hash
from .core import DriverHistory, RoadNetwork
from .features import Scalers, fit_scalers
from .model import EnergyModel
from .prep import DriverPrep, prep_dataset
from .training import (
    FineTuneResult,
    Params,
    TrainResult,
    fine_tune,
    meta_train,
    pooled_train,
)

logger = logging.getLogger(__name__)


@dataclass
class TrainedArtifacts:
    config: Config
    seed: int
    scalers: Scalers
    model: EnergyModel
    global_params: Params
    train_result: TrainResult
    drivers: list[DriverPrep]


def build_model(cfg: Config, scalers: Scalers, seed: int) -> EnergyModel:
    torch.manual_seed(seed)
    return EnergyModel(cfg.model, n_road_types=len(scalers.road_type_vocab))


def train_global(
    histories: Sequence[DriverHistory],
    network: RoadNetwork,
    cfg: Config,
    seed: int,
) -> TrainedArtifacts:
    """Fit scalers, prepare every driver, and train the shared parameters."""
    scalers = fit_scalers(histories, network)
    drivers = prep_dataset(histories, network, scalers, cfg.model, seed)
    if not drivers:
        raise ValueError("no drivers with usable trips")
    model = build_model(cfg, scalers, seed)
    if cfg.meta.strategy == "meta":
        result = meta_train(model, drivers, cfg.meta)
    else:
        result = pooled_train(model, drivers, cfg.meta)
    return TrainedArtifacts(
        config=cfg,
        seed=seed,
        scalers=scalers,
        model=model,
        global_params=result.params,
        train_result=result,
        drivers=drivers,
    )


def finetune_all(artifacts: TrainedArtifacts, driver_ids: Optional[Sequence[str]] = None) -> dict[str, FineTuneResult]:
    """Fine-tune the global parameters for each requested driver (meta
    strategy); the pooled strategy serves the shared parameters unchanged."""
    if artifacts.config.meta.strategy != "meta":
        return {}
    wanted = set(driver_ids) if driver_ids is not None else None
    out: dict[str, FineTuneResult] = {}
    for driver in artifacts.drivers:
        if wanted is not None and driver.driver_id not in wanted:
            continue
        out[driver.driver_id] = fine_tune(artifacts.model, artifacts.global_params, driver, artifacts.config.meta)
    return out


# --- persistence -------------------------------------------------------------


def global_metadata(artifacts: TrainedArtifacts, variant: str = "full") -> dict:
    return {
        "kind": "global",
        "variant": variant,
        "seed": artifacts.seed,
        "config": config_dict(artifacts.config),
        "config_hash": config_hash(artifacts.config),
        "scalers": artifacts.scalers.to_dict(),
        "epoch": artifacts.train_result.best_epoch,
        "val_loss": artifacts.train_result.best_val,
        "n_drivers": len(artifacts.drivers),
    }


def save_model(path: str | Path, params: Params, metadata: dict) -> str:
    """Write the tensor container and a sidecar metadata JSON; returns the
    container hash."""
    import json

    path = Path(path)
    digest = save_checkpoint(path, params, metadata)
    sidecar = path.with_suffix(".json")
    write_bytes_atomic(sidecar, json.dumps(metadata, sort_keys=True, indent=1).encode("utf-8"))
    return digest


def load_model(path: str | Path) -> tuple[EnergyModel, Params, dict, str]:
    """Rebuild the model from a checkpoint's embedded config and load weights."""
    tensors, meta, digest = load_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    scalers = Scalers.from_dict(meta["scalers"])
    model = EnergyModel(cfg.model, n_road_types=len(scalers.road_type_vocab))
    own = dict(model.named_parameters())
    if set(own) != set(tensors):
        missing = sorted(set(own) ^ set(tensors))
        raise ValueError(f"checkpoint parameters do not match the model: {missing}")
    with torch.no_grad():
        for name, p in model.named_parameters():
            if tuple(p.shape) != tuple(tensors[name].shape):
                raise ValueError(f"checkpoint tensor {name} has shape {tuple(tensors[name].shape)}, expected {tuple(p.shape)}")
            p.copy_(tensors[name])
    return model, {n: p.detach().clone() for n, p in model.named_parameters()}, meta, digest
