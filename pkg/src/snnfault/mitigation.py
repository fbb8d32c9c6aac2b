"""Fault mitigation: fault-aware pruning (FaP), pruning + retraining (FaPIT) and
pruning + retraining with per-layer threshold optimisation (FalVolt).

All three start by zeroing the weights that sit on faulty PEs (equivalent to
enabling the PE bypass) and evaluate on the bypassed grid. FaPIT and FalVolt
then retrain the surviving weights; pruned weights are frozen and re-zeroed at
the end of every epoch.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .faults import FaultMap
from .network import NetworkSpec
from .systolic import FixedPointFormat, PEGrid, WeightMapping, prune_masks_for, run_inference
from .train import TrainConfig, fit, thresholds, zero_pruned

STRATEGIES = ("FaP", "FaPIT", "FalVolt")


@dataclass
class MitigationPlan:
    strategy: str
    retrain_epochs: int
    train_config: TrainConfig
    pruned: dict
    initial_threshold: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "FaP" and self.retrain_epochs != 0:
            raise ConfigurationError("FaP never retrains")
        if self.strategy == "FaPIT" and self.train_config.optimize_threshold:
            raise ConfigurationError("FaPIT keeps thresholds fixed")
        if self.strategy == "FalVolt" and not self.train_config.optimize_threshold:
            raise ConfigurationError("FalVolt optimises thresholds")


@dataclass
class MitigationOutcome:
    strategy: str
    params: dict
    v_thresholds: list
    accuracy: float
    history: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    threshold_history: list = field(default_factory=list)
    epochs_to_recovery: Optional[int] = None
    pruned_zero_ok: list = field(default_factory=list)


def epochs_to_recovery(history, baseline, tolerance):
    """First index whose accuracy is within ``tolerance`` of ``baseline``; None if never."""
    if len(history) == 0:
        raise ConfigurationError("empty accuracy history")
    for i, acc in enumerate(history):
        if acc >= baseline - tolerance - 1e-12:
            return i
    return None


def _pruned_zero(params, masks):
    return all(bool(np.all(params[k][m] == 0.0)) for k, m in masks.items())


def _set_thresholds(spec, params, value):
    out = dict(params)
    for i in spec.spiking_layers():
        out[f"{i}.v_threshold"] = np.array(float(value))
    return out


def _setup(spec, params, fault_map, mapping, fmt):
    mapping = mapping or WeightMapping(fault_map.grid_size)
    masks = prune_masks_for(spec, fault_map, mapping)
    grid = PEGrid.bypass_faulty(fault_map, fmt)
    return mapping, masks, grid, zero_pruned(params, masks)


def fap(spec: NetworkSpec, params, fault_map: FaultMap, eval_set, mapping=None, fmt=FixedPointFormat(),
        baseline=None, tolerance=0.01):
    """Prune the weights on faulty PEs and evaluate on the bypassed grid; no training."""
    mapping, masks, grid, pruned = _setup(spec, params, fault_map, mapping, fmt)
    acc = run_inference(spec, pruned, grid, *eval_set, mapping=mapping)
    rec = epochs_to_recovery([acc], baseline, tolerance) if baseline is not None else None
    return MitigationOutcome("FaP", pruned, thresholds(spec, pruned), acc, [acc], [], [thresholds(spec, pruned)],
                             rec, [_pruned_zero(pruned, masks)])


def _retrain(strategy, spec, params, fault_map, train_set, eval_set, config, mapping, fmt, baseline, tolerance,
             initial_threshold, on_epoch):
    mapping, masks, grid, pruned = _setup(spec, params, fault_map, mapping, fmt)
    plan = MitigationPlan(strategy, config.epochs, config, masks, initial_threshold)
    start = _set_thresholds(spec, pruned, plan.initial_threshold)

    def evaluate(p):
        return run_inference(spec, p, grid, *eval_set, mapping=mapping)

    acc0 = evaluate(start)
    outcome = MitigationOutcome(strategy, start, thresholds(spec, start), acc0, [acc0], [],
                                [thresholds(spec, start)], None, [_pruned_zero(start, masks)])

    def record(rec, p):
        outcome.history.append(rec.accuracy)
        outcome.losses.append(rec.loss)
        outcome.threshold_history.append(list(rec.v_thresholds))
        outcome.pruned_zero_ok.append(_pruned_zero(p, masks))
        if on_epoch is not None:
            on_epoch(strategy, rec, p)

    final, _ = fit(spec, start, *train_set, config, evaluate=evaluate, prune_masks=masks, on_epoch=record)
    outcome.params = final
    outcome.v_thresholds = thresholds(spec, final)
    outcome.accuracy = outcome.history[-1]
    if baseline is not None:
        outcome.epochs_to_recovery = epochs_to_recovery(outcome.history, baseline, tolerance)
    return outcome


def falvolt(spec, params, fault_map, train_set, eval_set, config: TrainConfig, mapping=None,
            fmt=FixedPointFormat(), baseline=None, tolerance=0.01, initial_threshold=1.0, on_epoch=None):
    """Prune, reset thresholds, then retrain weights, time constants and per-layer thresholds.

    ``history[0]`` is the accuracy straight after pruning; ``history[e]`` after
    ``e`` retraining epochs. With ``config.epochs == 0`` the result equals :func:`fap`.
    """
    if not config.optimize_threshold:
        raise ConfigurationError("falvolt requires optimize_threshold=True")
    return _retrain("FalVolt", spec, params, fault_map, train_set, eval_set, config, mapping, fmt, baseline,
                    tolerance, initial_threshold, on_epoch)


def fapit(spec, params, fault_map, train_set, eval_set, config: TrainConfig, mapping=None,
          fmt=FixedPointFormat(), baseline=None, tolerance=0.01, initial_threshold=1.0, on_epoch=None):
    """Same retraining loop as :func:`falvolt` with every threshold frozen."""
    if config.optimize_threshold:
        raise ConfigurationError("fapit requires optimize_threshold=False")
    return _retrain("FaPIT", spec, params, fault_map, train_set, eval_set, config, mapping, fmt, baseline,
                    tolerance, initial_threshold, on_epoch)


def run_strategy(strategy, spec, params, fault_map, train_set, eval_set, config, **kw):
    if strategy == "FaP":
        kw.pop("on_epoch", None)
        kw.pop("initial_threshold", None)
        return fap(spec, params, fault_map, eval_set, **kw)
    fn = falvolt if strategy == "FalVolt" else fapit
    return fn(spec, params, fault_map, train_set, eval_set,
              replace(config, optimize_threshold=strategy == "FalVolt"), **kw)
