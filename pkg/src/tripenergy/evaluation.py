"""Metrics, the Average baseline, ablation runs, long-tail reporting, and the
K/q sensitivity sweep.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .config import Config, VARIANTS, apply_variant, config_hash
from .core import DriverHistory, RoadNetwork
from .features import Scalers, destandardize_label, route_length_m
from .model import EnergyModel
from .pipeline import TrainedArtifacts, finetune_all, train_global
from .prep import DriverPrep
from .training import Params
from torch.func import functional_call

logger = logging.getLogger(__name__)

MAPE_EPSILON = 1e-2  # energy units; guards division by near-zero trip labels
LONG_TAIL_THRESHOLD = 10


@dataclass(frozen=True)
class MetricValues:
    mse: float
    mae: float
    mape: float  # percent

    def as_dict(self) -> dict[str, float]:
        return {"MSE": self.mse, "MAE": self.mae, "MAPE": self.mape}


def metrics(preds: Sequence[float], labels: Sequence[float], epsilon: float = MAPE_EPSILON) -> MetricValues:
    """MSE / MAE / MAPE(%) with the MAPE denominator clamped to epsilon."""
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    if not preds:
        raise ValueError("metrics need at least one point")
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    err = p - y
    denom = np.maximum(np.abs(y), epsilon)
    return MetricValues(
        mse=float(np.mean(err**2)),
        mae=float(np.mean(np.abs(err))),
        mape=float(np.mean(np.abs(err) / denom) * 100.0),
    )


@dataclass(frozen=True)
class TripPrediction:
    driver_id: str
    trip_id: str
    y_true: float  # raw energy units
    y_pred: float


@dataclass
class EvalReport:
    variant: str
    split: str
    seed: int
    config_hash: str
    n_trips: int
    raw: MetricValues
    standardized: MetricValues
    per_driver: dict[str, dict[str, float]]
    long_tail: Optional[dict] = None
    mape_epsilon: float = MAPE_EPSILON

    def to_dict(self) -> dict:
        out = {
            "variant": self.variant,
            "split": self.split,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "n_trips": self.n_trips,
            "metrics_raw": self.raw.as_dict(),
            "metrics_standardized": self.standardized.as_dict(),
            "per_driver": self.per_driver,
            "long_tail": self.long_tail,
            "mape_epsilon": self.mape_epsilon,
        }
        return out

    def csv_rows(self) -> list[tuple[str, str, str, float]]:
        rows = [(self.variant, self.split, k, v) for k, v in sorted(self.raw.as_dict().items())]
        rows += [(self.variant, self.split, f"{k}_std", v) for k, v in sorted(self.standardized.as_dict().items())]
        if self.long_tail and self.long_tail.get("n_trips", 0) > 0:
            rows += [
                (self.variant, self.split, f"long_tail_{k}", v)
                for k, v in sorted(self.long_tail["metrics_raw"].items())
            ]
        return rows


def predict_split(
    model: EnergyModel,
    scalers: Scalers,
    driver: DriverPrep,
    params: Params,
    split: str,
) -> list[TripPrediction]:
    batch = getattr(driver, split)
    if batch is None or batch.y is None:
        return []
    with torch.no_grad():
        out = functional_call(model, dict(params), (batch,))
    preds = [destandardize_label(float(v), scalers) for v in out.y_std]
    labels = [destandardize_label(float(v), scalers) for v in batch.y]
    return [
        TripPrediction(driver.driver_id, tid, y, p)
        for tid, y, p in zip(batch.ids, labels, preds)
    ]


def report_from_predictions(
    variant: str,
    split: str,
    preds: Sequence[TripPrediction],
    train_counts: Mapping[str, int],
    scalers: Scalers,
    cfg: Config,
    seed: int,
    threshold: int = LONG_TAIL_THRESHOLD,
) -> EvalReport:
    if not preds:
        raise ValueError(f"no predictions for split {split!r}")
    raw = metrics([p.y_pred for p in preds], [p.y_true for p in preds])
    std_scale = scalers.label_std
    standardized = metrics(
        [(p.y_pred - scalers.label_mean) / std_scale for p in preds],
        [(p.y_true - scalers.label_mean) / std_scale for p in preds],
        epsilon=MAPE_EPSILON / std_scale,
    )
    per_driver: dict[str, dict[str, float]] = {}
    for driver_id in sorted({p.driver_id for p in preds}):
        mine = [p for p in preds if p.driver_id == driver_id]
        m = metrics([p.y_pred for p in mine], [p.y_true for p in mine])
        per_driver[driver_id] = {"n": len(mine), "train_count": train_counts.get(driver_id, 0), **m.as_dict()}
    tail_preds = [p for p in preds if train_counts.get(p.driver_id, 0) < threshold]
    if tail_preds:
        tail = {
            "threshold": threshold,
            "n_drivers": len({p.driver_id for p in tail_preds}),
            "n_trips": len(tail_preds),
            "metrics_raw": metrics([p.y_pred for p in tail_preds], [p.y_true for p in tail_preds]).as_dict(),
        }
    else:
        tail = {"threshold": threshold, "n_drivers": 0, "n_trips": 0, "metrics_raw": {}}
    return EvalReport(
        variant=variant,
        split=split,
        seed=seed,
        config_hash=config_hash(cfg),
        n_trips=len(preds),
        raw=raw,
        standardized=standardized,
        per_driver=per_driver,
        long_tail=tail,
    )


def long_tail_report(report: EvalReport, preds: Sequence[TripPrediction], train_counts: Mapping[str, int], threshold: int = LONG_TAIL_THRESHOLD) -> dict:
    """Standalone long-tail filter (also embedded in report_from_predictions)."""
    tail = [p for p in preds if train_counts.get(p.driver_id, 0) < threshold]
    if not tail:
        return {"threshold": threshold, "n_drivers": 0, "n_trips": 0, "metrics_raw": {}}
    return {
        "threshold": threshold,
        "n_drivers": len({p.driver_id for p in tail}),
        "n_trips": len(tail),
        "metrics_raw": metrics([p.y_pred for p in tail], [p.y_true for p in tail]).as_dict(),
    }


# --- Average baseline --------------------------------------------------------


def average_rate(history: DriverHistory, network: RoadNetwork) -> Optional[float]:
    """Mean energy-per-km over a driver's train trips (raw units)."""
    if history.splits is None:
        return None
    by_id = history.trips_by_id()
    rates = []
    for tid in history.splits.train:
        t = by_id[tid]
        if t.total_energy is None or not t.route:
            continue
        km = route_length_m(t.route, network) / 1000.0
        if km > 0:
            rates.append(t.total_energy / km)
    return float(np.mean(rates)) if rates else None


def baseline_average_predictions(
    histories: Sequence[DriverHistory],
    network: RoadNetwork,
    split: str,
) -> list[TripPrediction]:
    """Average baseline: per-driver mean energy/km times route length."""
    per_driver = {h.driver_id: average_rate(h, network) for h in histories}
    known = [r for r in per_driver.values() if r is not None]
    if not known:
        raise ValueError("no driver has train trips with labels")
    global_rate = float(np.mean(known))
    out: list[TripPrediction] = []
    for h in histories:
        if h.splits is None:
            continue
        by_id = h.trips_by_id()
        rate = per_driver[h.driver_id] if per_driver[h.driver_id] is not None else global_rate
        for tid in getattr(h.splits, split):
            t = by_id[tid]
            if t.total_energy is None or not t.route:
                continue
            km = route_length_m(t.route, network) / 1000.0
            out.append(TripPrediction(h.driver_id, tid, t.total_energy, rate * km))
    return out


# --- variant runs -------------------------------------------------------------


@dataclass
class VariantRun:
    variant: str
    report: EvalReport
    predictions: list[TripPrediction]
    artifacts: TrainedArtifacts
    driver_params: dict[str, Params]


def evaluate_artifacts(
    artifacts: TrainedArtifacts,
    driver_params: Mapping[str, Params],
    split: str,
    variant: str,
) -> tuple[EvalReport, list[TripPrediction]]:
    preds: list[TripPrediction] = []
    train_counts: dict[str, int] = {}
    for driver in artifacts.drivers:
        params = driver_params.get(driver.driver_id, artifacts.global_params)
        preds.extend(predict_split(artifacts.model, artifacts.scalers, driver, params, split))
        train_counts[driver.driver_id] = driver.train_count
    report = report_from_predictions(
        variant, split, preds, train_counts, artifacts.scalers, artifacts.config, artifacts.seed
    )
    return report, preds


def run_variant(
    variant: str,
    histories: Sequence[DriverHistory],
    network: RoadNetwork,
    base_cfg: Config,
    seed: int,
    split: str = "test",
) -> VariantRun:
    """Train the requested ablation variant from scratch and evaluate it."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    cfg = apply_variant(base_cfg, variant)
    artifacts = train_global(histories, network, cfg, seed)
    driver_params = {d: r.params for d, r in finetune_all(artifacts).items()}
    report, preds = evaluate_artifacts(artifacts, driver_params, split, variant)
    return VariantRun(variant=variant, report=report, predictions=preds, artifacts=artifacts, driver_params=driver_params)


# --- sensitivity sweep ---------------------------------------------------------

SWEEP_VALUES = {"top_k": (1, 3, 5, 7, 9), "window": (1, 2, 4, 8)}


def sensitivity_sweep(
    param: str,
    histories: Sequence[DriverHistory],
    network: RoadNetwork,
    base_cfg: Config,
    seed: int,
) -> list[tuple[str, int, float]]:
    """Train the full model across a grid of one hyperparameter; returns
    (param, value, test MAPE) rows."""
    if param not in SWEEP_VALUES:
        raise ValueError(f"sweep parameter must be one of {sorted(SWEEP_VALUES)}")
    rows = []
    for value in SWEEP_VALUES[param]:
        cfg = dataclasses.replace(base_cfg, model=dataclasses.replace(base_cfg.model, **{param: value}))
        run = run_variant("full", histories, network, cfg, seed)
        rows.append((param, value, run.report.raw.mape))
        logger.info("sweep %s=%d: test MAPE %.3f%%", param, value, run.report.raw.mape)
    return rows


# --- report output --------------------------------------------------------------


def write_report_json(reports: Sequence[EvalReport], path: str | Path) -> None:
    payload = [r.to_dict() for r in reports]
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def write_report_csv(reports: Sequence[EvalReport], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "split", "metric", "value"])
        for r in reports:
            for row in r.csv_rows():
                writer.writerow([row[0], row[1], row[2], repr(row[3])])


def write_sweep_csv(rows: Sequence[tuple[str, int, float]], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value", "MAPE"])
        for param, value, mape in rows:
            writer.writerow([param, value, repr(mape)])
