"""Joint loss, meta-optimization over drivers, and per-driver fine-tuning.

The inner loop is plain gradient descent (differentiable when second_order is
on); the outer update runs Adam over the summed query losses. Fine-tuning
takes plain gradient steps on a driver's merged train split.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import torch
from torch.func import functional_call

from .config import MetaConfig
from .model import EnergyModel, ModelOutput
from .prep import DriverPrep, TargetBatch

logger = logging.getLogger(__name__)

Params = dict[str, torch.Tensor]


def named_params(model: torch.nn.Module) -> Params:
    return dict(model.named_parameters())


def clone_params(params: Mapping[str, torch.Tensor], requires_grad: bool = False) -> Params:
    return {n: p.detach().clone().requires_grad_(requires_grad) for n, p in params.items()}


@dataclass
class LossParts:
    total: torch.Tensor
    behavior: torch.Tensor
    energy: torch.Tensor


def batch_loss(output: ModelOutput, batch: TargetBatch) -> LossParts:
    """Per-trip loss = behavior MAE (summed over the f targets, averaged over
    roads) + energy MAE, averaged over the batch. Standardized units."""
    if batch.y is None:
        raise ValueError("batch carries no labels")
    energy_rows = (output.y_std - batch.y).abs()
    if output.behaviors is not None:
        if batch.ye is None:
            raise ValueError("behavior loss requires behavior labels")
        err = (output.behaviors - batch.ye).abs() * batch.road_mask.unsqueeze(-1).to(batch.ye.dtype)
        behavior_rows = err.sum(dim=(1, 2)) / batch.n_lens.to(batch.ye.dtype)
    else:
        behavior_rows = torch.zeros_like(energy_rows)
    total_rows = behavior_rows + energy_rows
    return LossParts(total=total_rows.mean(), behavior=behavior_rows.mean(), energy=energy_rows.mean())


def functional_loss(model: EnergyModel, params: Mapping[str, torch.Tensor], batch: TargetBatch) -> LossParts:
    output: ModelOutput = functional_call(model, dict(params), (batch,))
    return batch_loss(output, batch)


def inner_adapt(
    params: Params,
    loss_fn: Callable[[Params], torch.Tensor],
    lr: float,
    steps: int = 1,
    create_graph: bool = False,
) -> Params:
    """Gradient-descent adaptation; with create_graph the result stays
    differentiable with respect to the input parameters."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    current = dict(params)
    for _ in range(steps):
        loss = loss_fn(current)
        names = list(current)
        values = [current[n] for n in names]
        grads = torch.autograd.grad(loss, values, create_graph=create_graph, allow_unused=True)
        current = {
            n: (v if g is None else v - lr * g) for n, v, g in zip(names, values, grads)
        }
    return current


def adapt_on_support(
    model: EnergyModel,
    params: Params,
    driver: DriverPrep,
    cfg: MetaConfig,
    create_graph: bool,
) -> Params:
    if driver.support is None:
        raise ValueError(f"driver {driver.driver_id}: empty support set")
    return inner_adapt(
        params,
        lambda p: functional_loss(model, p, driver.support).total,
        cfg.inner_lr,
        steps=cfg.inner_steps,
        create_graph=create_graph,
    )


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: Params
    best_epoch: int
    best_val: float
    history: list[EpochLog] = field(default_factory=list)


def _validation_loss(model: EnergyModel, drivers: Sequence[DriverPrep], cfg: MetaConfig) -> float:
    """Mean held-out loss. Meta strategy adapts on support first (no graph);
    drivers without a val split fall back to their query/train split."""
    losses = []
    base = named_params(model)
    for d in drivers:
        batch = d.val if d.val is not None else (d.query if d.query is not None else d.train)
        if batch is None:
            continue
        if cfg.strategy == "meta":
            if d.support is None:
                continue
            fast = adapt_on_support(model, base, d, cfg, create_graph=False)
            fast = {n: p.detach() for n, p in fast.items()}
        else:
            fast = base
        with torch.no_grad():
            losses.append(float(functional_loss(model, fast, batch).total))
    if not losses:
        raise ValueError("no driver provides a validation signal")
    return sum(losses) / len(losses)


def _snapshot(model: EnergyModel) -> Params:
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def _restore(model: EnergyModel, params: Params) -> None:
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(params[n])


def meta_train(
    model: EnergyModel,
    drivers: Sequence[DriverPrep],
    cfg: MetaConfig,
    log_every: int = 0,
) -> TrainResult:
    """Bi-level optimization: per driver adapt on support, accumulate query
    losses, Adam step on their sum. Early stopping on validation loss."""
    torch.set_num_threads(1)  # keep reductions bit-reproducible
    usable = [d for d in sorted(drivers, key=lambda d: d.driver_id) if d.support is not None and d.query is not None]
    usable_ids = {d.driver_id for d in usable}
    skipped = sorted(d.driver_id for d in drivers if d.driver_id not in usable_ids)
    if skipped:
        logger.warning("meta_train: skipping drivers without support/query: %s", skipped)
    if not usable:
        raise ValueError("meta_train requires at least one driver with support and query sets")

    opt = torch.optim.Adam(model.parameters(), lr=cfg.outer_lr, weight_decay=cfg.l2)
    batch_size = cfg.meta_batch_size if cfg.meta_batch_size > 0 else len(usable)
    best = _snapshot(model)
    best_val = math.inf
    best_epoch = -1
    history: list[EpochLog] = []
    stale = 0

    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for start in range(0, len(usable), batch_size):
            chunk = usable[start : start + batch_size]
            opt.zero_grad()
            total: torch.Tensor | None = None
            base = named_params(model)
            for driver in chunk:
                fast = adapt_on_support(model, base, driver, cfg, create_graph=cfg.second_order)
                q_loss = functional_loss(model, fast, driver.query).total
                total = q_loss if total is None else total + q_loss
            assert total is not None
            total.backward()
            opt.step()
            epoch_loss += float(total.detach())
        val = _validation_loss(model, usable, cfg)
        history.append(EpochLog(epoch, epoch_loss / len(usable), val))
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d: train %.5f val %.5f", epoch, epoch_loss / len(usable), val)
        if val < best_val - 1e-12:
            best_val = val
            best_epoch = epoch
            best = _snapshot(model)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    _restore(model, best)
    return TrainResult(params=_snapshot(model), best_epoch=best_epoch, best_val=best_val, history=history)


def pooled_train(
    model: EnergyModel,
    drivers: Sequence[DriverPrep],
    cfg: MetaConfig,
    log_every: int = 0,
) -> TrainResult:
    """Non-meta baseline: Adam over the pooled train trips of all drivers."""
    torch.set_num_threads(1)
    usable = [d for d in sorted(drivers, key=lambda d: d.driver_id) if d.train is not None]
    if not usable:
        raise ValueError("pooled_train requires drivers with train trips")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.outer_lr, weight_decay=cfg.l2)
    n_total = sum(d.train.size for d in usable)  # type: ignore[union-attr]
    best = _snapshot(model)
    best_val = math.inf
    best_epoch = -1
    history: list[EpochLog] = []
    stale = 0
    for epoch in range(cfg.epochs):
        opt.zero_grad()
        total: torch.Tensor | None = None
        params = named_params(model)
        for d in usable:
            assert d.train is not None
            weight = d.train.size / n_total
            loss = functional_loss(model, params, d.train).total * weight
            total = loss if total is None else total + loss
        assert total is not None
        total.backward()
        opt.step()
        train_loss = float(total.detach())
        val = _validation_loss(model, usable, cfg)
        history.append(EpochLog(epoch, train_loss, val))
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d: train %.5f val %.5f", epoch, train_loss, val)
        if val < best_val - 1e-12:
            best_val, best_epoch, best, stale = val, epoch, _snapshot(model), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    _restore(model, best)
    return TrainResult(params=_snapshot(model), best_epoch=best_epoch, best_val=best_val, history=history)


@dataclass
class FineTuneResult:
    params: Params
    steps: int
    val_loss: float
    flagged_empty: bool = False


def fine_tune(model: EnergyModel, base: Mapping[str, torch.Tensor], driver: DriverPrep, cfg: MetaConfig) -> FineTuneResult:
    """Adapt the global parameters to one driver on its merged train split.

    The base parameters are never mutated. Validation (driver's val split, or
    the train loss when absent) is checked every finetune_check_every steps;
    training stops after finetune_patience checks without improvement or at
    the step cap, whichever is first, returning the best parameters seen.
    """
    if driver.train is None:
        logger.warning("fine_tune: driver %s has no train trips; returning base parameters", driver.driver_id)
        return FineTuneResult(params=clone_params(base), steps=0, val_loss=math.inf, flagged_empty=True)

    def val_loss(p: Mapping[str, torch.Tensor]) -> float:
        batch = driver.val if driver.val is not None else driver.train
        with torch.no_grad():
            return float(functional_loss(model, p, batch).total)

    params = clone_params(base, requires_grad=True)
    best = clone_params(params)
    best_val = val_loss(params)
    stale = 0
    steps_done = 0
    for step in range(1, cfg.finetune_max_steps + 1):
        loss = functional_loss(model, params, driver.train).total
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
        with torch.no_grad():
            new = {
                n: (v if g is None else v - cfg.finetune_lr * g)
                for (n, v), g in zip(params.items(), grads)
            }
        params = {n: v.detach().requires_grad_(True) for n, v in new.items()}
        steps_done = step
        if step % cfg.finetune_check_every == 0 or step == cfg.finetune_max_steps:
            val = val_loss(params)
            if val < best_val - 1e-12:
                best_val = val
                best = clone_params(params)
                stale = 0
            else:
                stale += 1
                if stale >= cfg.finetune_patience:
                    break
    return FineTuneResult(params=best, steps=steps_done, val_loss=best_val)
