"""Configuration: TOML file -> typed config objects, plus ablation switches."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib  # type: ignore[no-redef]

from .ingestion import VehicleParams

VARIANTS = ("full", "pec", "meta_ec", "rand_hist", "state", "no_beh_dec", "r2b")


@dataclass(frozen=True)
class DataConfig:
    energy_mode: str = "obd"  # obd | mechanical
    vehicle: VehicleParams = field(default_factory=VehicleParams)


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 20  # shared embedding width
    heads: int = 4
    window: int = 4  # states per behavior-conv window
    top_k: int = 5
    n_behaviors: int = 4  # speed, accel, energy/hour, energy/km
    mlp_hidden: int = 40
    dist_max: float = 100_000.0  # positional-encoding scale, meters
    time_max: float = 36_000.0  # positional-encoding scale, seconds
    conv_mode: str = "depthwise"  # depthwise | full
    time_similarity: str = "time_of_day"  # time_of_day | absolute
    lanes_cap: int = 6  # lane counts at or above this share one bucket
    # ablation switches; the full model uses the defaults
    use_preferences: bool = True
    behavior_mode: str = "b2b"  # b2b | r2b | off
    state_mode: str = "behavior"  # behavior | state (skip the conv)
    selection: str = "top_k"  # top_k | random

    def __post_init__(self) -> None:
        if self.dim % 2 != 0:
            raise ValueError("dim must be even for sinusoidal encodings")
        if self.dim % self.heads != 0:
            raise ValueError("heads must divide dim")
        if self.conv_mode not in ("depthwise", "full"):
            raise ValueError(f"unknown conv_mode {self.conv_mode!r}")
        if self.behavior_mode not in ("b2b", "r2b", "off"):
            raise ValueError(f"unknown behavior_mode {self.behavior_mode!r}")
        if self.state_mode not in ("behavior", "state"):
            raise ValueError(f"unknown state_mode {self.state_mode!r}")
        if self.selection not in ("top_k", "random"):
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.time_similarity not in ("time_of_day", "absolute"):
            raise ValueError(f"unknown time_similarity {self.time_similarity!r}")


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 6e-4
    outer_lr: float = 6e-3
    finetune_lr: float = 6e-4
    epochs: int = 100
    patience: int = 10  # early-stop patience, epochs
    l2: float = 1e-5
    second_order: bool = True
    inner_steps: int = 1
    meta_batch_size: int = 0  # 0 = all drivers per outer step
    finetune_max_steps: int = 200
    finetune_patience: int = 3
    finetune_check_every: int = 10
    strategy: str = "meta"  # meta | pooled

    def __post_init__(self) -> None:
        if min(self.inner_lr, self.outer_lr, self.finetune_lr) <= 0:
            raise ValueError("learning rates must be strictly positive")
        if self.strategy not in ("meta", "pooled"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass(frozen=True)
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 8000


@dataclass(frozen=True)
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    serve: ServeConfig = field(default_factory=ServeConfig)


def _build(cls, table: dict[str, Any], path: Path, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ValueError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**table)


def load_config(path: str | Path | None) -> Config:
    """Load TOML config; missing file is an error, missing keys take defaults."""
    if path is None:
        return Config()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with path.open("rb") as fh:
        raw = tomllib.load(fh)
    unknown = set(raw) - {"data", "model", "meta", "serve"}
    if unknown:
        raise ValueError(f"{path}: unknown sections {sorted(unknown)}")
    data_tbl = dict(raw.get("data", {}))
    vehicle_tbl = data_tbl.pop("vehicle", {})
    data = DataConfig(
        energy_mode=data_tbl.pop("energy_mode", "obd"),
        vehicle=_build(VehicleParams, dict(vehicle_tbl), path, "data.vehicle"),
    )
    if data_tbl:
        raise ValueError(f"{path}: unknown keys in [data]: {sorted(data_tbl)}")
    if data.energy_mode not in ("obd", "mechanical"):
        raise ValueError(f"{path}: energy_mode must be obd or mechanical")
    return Config(
        data=data,
        model=_build(ModelConfig, dict(raw.get("model", {})), path, "model"),
        meta=_build(MetaConfig, dict(raw.get("meta", {})), path, "meta"),
        serve=_build(ServeConfig, dict(raw.get("serve", {})), path, "serve"),
    )


def apply_variant(cfg: Config, variant: str) -> Config:
    """Map an ablation name onto config switches; `full` is the identity."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    model = cfg.model
    meta = cfg.meta
    if variant == "pec":
        meta = dataclasses.replace(meta, strategy="pooled")
    elif variant == "meta_ec":
        model = dataclasses.replace(model, use_preferences=False, behavior_mode="off")
    elif variant == "rand_hist":
        model = dataclasses.replace(model, selection="random")
    elif variant == "state":
        model = dataclasses.replace(model, state_mode="state")
    elif variant == "no_beh_dec":
        model = dataclasses.replace(model, behavior_mode="off")
    elif variant == "r2b":
        model = dataclasses.replace(model, behavior_mode="r2b")
    return dataclasses.replace(cfg, model=model, meta=meta)


def config_dict(cfg: Config) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict[str, Any]) -> Config:
    data_tbl = dict(d.get("data", {}))
    vehicle = VehicleParams(**data_tbl.pop("vehicle", {}))
    return Config(
        data=DataConfig(vehicle=vehicle, **data_tbl),
        model=ModelConfig(**d.get("model", {})),
        meta=MetaConfig(**d.get("meta", {})),
        serve=ServeConfig(**d.get("serve", {})),
    )


def config_hash(cfg: Config) -> str:
    blob = json.dumps(config_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
