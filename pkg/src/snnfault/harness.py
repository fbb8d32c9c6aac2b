"""Experiment configuration, trial orchestration and result emission.

A run is described by a JSON :class:`ExperimentConfig`. Every sweep point runs
``trials`` independent fault maps; trial ``k`` of point ``p`` draws its fault
map from ``SeedSequence([seed, p, k])``, so the same config always yields the
same maps, and mitigation strategies sharing a config see identical maps.
Results are reduced in trial order, which keeps CSV output byte-stable no
matter how many worker processes ran the trials.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint
from .data import load_mnist, mnist_paths
from .errors import ConfigurationError
from .faults import MSB, generate_fault_map, percent_to_count
from .mitigation import STRATEGIES, run_strategy
from .network import NetworkSpec, accuracy, desk_network, init_params
from .systolic import FixedPointFormat, PEGrid, run_inference
from .train import TrainConfig, fit, write_curve_csv

log = logging.getLogger(__name__)

MODES = ("train", "sweep-bit", "sweep-count", "sweep-size", "mitigate", "threshold-sweep")
THREADS_ENV = "SNNFAULT_THREADS"
SWEEP_COLUMNS = ["series", "sweep_value", "mean_acc", "std_acc", "n_trials"]


@dataclass
class ExperimentConfig:
    mode: str
    output_dir: str = "runs/out"
    network: Optional[dict] = None          # NetworkSpec dict; None = desk-scale default
    network_path: Optional[str] = None      # or a JSON file holding one
    data_root: str = "data/mnist"
    train_subset: int = 2000
    eval_subset: int = 500
    checkpoint: Optional[str] = None        # pretrained weights for non-train modes
    init_seed: int = 0
    init_gain: float = 2.0
    train: dict = field(default_factory=dict)   # TrainConfig fields
    grid_sizes: list = field(default_factory=lambda: [64])
    fraction_bits: int = 16
    # fault placement
    bits: list = field(default_factory=lambda: [MSB])
    stuck_values: list = field(default_factory=lambda: [1])
    fault_counts: list = field(default_factory=list)
    fault_percents: list = field(default_factory=list)
    bit_policy: str = "fixed"               # "fixed" (bits x stuck_values) or "random"
    trials: int = 8
    seed: int = 0
    # mitigation / threshold sweep
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    retrain_epochs: int = 10
    recovery_tolerance: float = 0.01
    thresholds: list = field(default_factory=list)
    baseline_accuracy: Optional[float] = None
    long_run: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if self.bit_policy not in ("fixed", "random"):
            raise ConfigurationError("bit_policy must be 'fixed' or 'random'")
        unknown = set(self.train) - {f.name for f in dataclasses.fields(TrainConfig)}
        if unknown:
            raise ConfigurationError(f"unknown train keys: {sorted(unknown)}")
        if self.mode != "train" and not self.checkpoint:
            raise ConfigurationError(f"mode {self.mode} needs a pretrained checkpoint")
        if self.mode in ("sweep-count", "mitigate", "threshold-sweep") and not (self.fault_counts or self.fault_percents):
            raise ConfigurationError(f"mode {self.mode} needs fault_counts or fault_percents")
        if self.mode == "threshold-sweep" and not self.thresholds:
            raise ConfigurationError("threshold-sweep needs a list of thresholds")
        if self.mode == "mitigate":
            bad = set(self.strategies) - set(STRATEGIES)
            if bad:
                raise ConfigurationError(f"unknown strategies {sorted(bad)}")
        if not self.long_run and max(self.grid_sizes, default=0) > 64 and self.mode != "train":
            raise ConfigurationError("grids above 64x64 need long_run=true (or --long-run)")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def network_spec(self):
        if self.network is not None:
            return NetworkSpec.from_dict(self.network)
        if self.network_path:
            return NetworkSpec.loads(Path(self.network_path).read_text())
        return desk_network()

    def train_config(self):
        return TrainConfig(**self.train)

    def fmt(self):
        return FixedPointFormat(self.fraction_bits)


@dataclass
class RunRecord:
    mode: str
    config_hash: str
    series: str
    sweep_value: object
    trial_accuracies: list
    mean_accuracy: float
    wall_clock_seconds: float = 0.0
    strategy: Optional[str] = None
    failures: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)


def trial_seed(seed, point, trial):
    return int(np.random.SeedSequence([seed, point, trial]).generate_state(1)[0])


def _counts(cfg: ExperimentConfig, n):
    if cfg.fault_counts:
        return [int(c) for c in cfg.fault_counts]
    return [percent_to_count(n, p) for p in cfg.fault_percents]


def _policy(cfg, bit, value):
    return ("random",) if cfg.bit_policy == "random" else ("fixed", int(bit), int(value))


# -- data / checkpoint helpers ---------------------------------------------------

def load_data(cfg: ExperimentConfig):
    train = load_mnist(*mnist_paths(cfg.data_root, "train"), subset=cfg.train_subset)
    test = load_mnist(*mnist_paths(cfg.data_root, "t10k"), subset=cfg.eval_subset)
    return train, test


def save_model(path, spec: NetworkSpec, params, extra=None):
    meta = {"network": spec.dumps()}
    meta.update(extra or {})
    checkpoint.save(path, params, meta)


def load_model(path):
    params, meta = checkpoint.load(path)
    if "network" not in meta:
        raise ConfigurationError(f"{path} carries no network description")
    return NetworkSpec.loads(meta["network"]), params, meta


# -- trial workers ---------------------------------------------------------------

_CTX = {}


def _init_worker(ctx):
    _CTX.clear()
    _CTX.update(ctx)


def _eval_trial(job):
    """Accuracy of the pretrained net on a grid with one freshly drawn fault map."""
    n, count, policy, seed = job
    spec, params, (x, y), fmt = _CTX["spec"], _CTX["params"], _CTX["eval"], _CTX["fmt"]
    fmap = generate_fault_map(n, count, policy, seed)
    return run_inference(spec, params, PEGrid(fmap, fmt=fmt), x, y)


def _mitigate_trial(job):
    strategy, n, count, seed, threshold = job
    ctx = _CTX
    fmap = generate_fault_map(n, count, ("fixed", MSB, 1), seed)
    kw = dict(fmt=ctx["fmt"], baseline=ctx["baseline"], tolerance=ctx["tolerance"])
    if strategy != "FaP":
        kw["initial_threshold"] = threshold
    out = run_strategy(strategy, ctx["spec"], ctx["params"], fmap, ctx["train"], ctx["eval"], ctx["train_cfg"], **kw)
    return {
        "accuracy": out.accuracy,
        "history": out.history,
        "losses": out.losses,
        "v_thresholds": out.v_thresholds,
        "threshold_history": out.threshold_history,
        "epochs_to_recovery": out.epochs_to_recovery,
        "pruned_zero_ok": out.pruned_zero_ok,
        "fault_map": fmap.dumps(),
    }


def _run_jobs(fn, jobs, ctx):
    """Run ``fn`` over ``jobs`` in order; a failing job yields an ``Exception`` in its slot."""
    workers = int(os.environ.get(THREADS_ENV, "1") or 1)

    if workers <= 1 or len(jobs) <= 1:
        _init_worker(ctx)
        results = []
        for job in jobs:
            try:
                results.append(fn(job))
            except Exception as e:  # trial isolation
                log.error("trial %s failed: %s", job, e)
                results.append(RuntimeError("".join(traceback.format_exception_only(type(e), e)).strip()))
        return results
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(ctx,)) as ex:
        futures = [ex.submit(fn, job) for job in jobs]
        results = []
        for fut, job in zip(futures, jobs):
            try:
                results.append(fut.result())
            except Exception as e:
                log.error("trial %s failed: %s", job, e)
                results.append(RuntimeError(str(e)))
        return results


def _summarise(cfg, series, value, results, started, strategy=None, extra=None):
    ok = [r for r in results if not isinstance(r, Exception)]
    accs = [float(r if not isinstance(r, dict) else r["accuracy"]) for r in ok]
    failures = [str(r) for r in results if isinstance(r, Exception)]
    return RunRecord(cfg.mode, cfg.config_hash(), series, value, accs,
                     float(np.mean(accs)) if accs else float("nan"),
                     round(time.perf_counter() - started, 3), strategy, failures, extra or {})


# -- modes -----------------------------------------------------------------------

def run_train(cfg: ExperimentConfig, out: Path):
    spec = cfg.network_spec()
    (xtr, ytr), (xte, yte) = load_data(cfg)
    tcfg = cfg.train_config()
    params = init_params(spec, seed=cfg.init_seed, gain=cfg.init_gain)
    started = time.perf_counter()
    params, history = fit(spec, params, xtr, ytr, tcfg, evaluate=lambda p: accuracy(spec, p, xte, yte))
    write_curve_csv(out / "training_curve.csv", history)
    acc = history[-1].accuracy if history else accuracy(spec, params, xte, yte)
    save_model(out / "model.ckpt", spec, params, {"eval_accuracy": f"{acc:.6f}"})
    rec = RunRecord("train", cfg.config_hash(), "baseline", tcfg.epochs, [acc], acc,
                    round(time.perf_counter() - started, 3),
                    extra={"history": [dataclasses.asdict(h) for h in history]})
    return [rec]


def _load_pretrained(cfg):
    spec, params, meta = load_model(cfg.checkpoint)
    (xtr, ytr), (xte, yte) = load_data(cfg)
    return spec, params, (xtr, ytr), (xte, yte)


def run_sweep(cfg: ExperimentConfig, out: Path):
    spec, params, _, test = _load_pretrained(cfg)
    fmt = cfg.fmt()
    ctx = {"spec": spec, "params": params, "eval": test, "fmt": fmt}
    baseline = run_inference(spec, params, PEGrid.healthy(cfg.grid_sizes[0], fmt), *test)
    points = []  # (series, value, n, count, policy)
    if cfg.mode == "sweep-bit":
        n = cfg.grid_sizes[0]
        count = _counts(cfg, n)[0] if (cfg.fault_counts or cfg.fault_percents) else 1
        for value in cfg.stuck_values:
            for bit in cfg.bits:
                points.append((f"sa{value}", int(bit), n, count, ("fixed", int(bit), int(value))))
    elif cfg.mode == "sweep-count":
        n = cfg.grid_sizes[0]
        for bit in cfg.bits:
            for value in cfg.stuck_values:
                for count in _counts(cfg, n):
                    points.append((f"b{bit}_sa{value}", count, n, count, _policy(cfg, bit, value)))
    elif cfg.mode == "sweep-size":
        for bit in cfg.bits:
            for value in cfg.stuck_values:
                for n in cfg.grid_sizes:
                    count = _counts(cfg, n)[0] if (cfg.fault_counts or cfg.fault_percents) else 4
                    points.append((f"b{bit}_sa{value}", n, n, count, _policy(cfg, bit, value)))
    records = []
    for p, (series, value, n, count, policy) in enumerate(points):
        started = time.perf_counter()
        jobs = [(n, count, policy, trial_seed(cfg.seed, p, k)) for k in range(cfg.trials)]
        results = _run_jobs(_eval_trial, jobs, ctx)
        records.append(_summarise(cfg, series, value, results, started,
                                  extra={"grid_size": n, "faulty_pes": count, "baseline": baseline}))
    return records


def run_mitigate(cfg: ExperimentConfig, out: Path):
    spec, params, train, test = _load_pretrained(cfg)
    fmt = cfg.fmt()
    n = cfg.grid_sizes[0]
    baseline = cfg.baseline_accuracy
    if baseline is None:
        baseline = run_inference(spec, params, PEGrid.healthy(n, fmt), *test)
    tcfg = dataclasses.replace(cfg.train_config(), epochs=cfg.retrain_epochs)
    ctx = {"spec": spec, "params": params, "train": train, "eval": test, "fmt": fmt, "baseline": baseline,
           "tolerance": cfg.recovery_tolerance, "train_cfg": tcfg}
    records = []
    if cfg.mode == "mitigate":
        for p, count in enumerate(_counts(cfg, n)):
            for strategy in cfg.strategies:
                started = time.perf_counter()
                # same seeds for every strategy: paired fault maps
                jobs = [(strategy, n, count, trial_seed(cfg.seed, p, k), 1.0) for k in range(cfg.trials)]
                results = _run_jobs(_mitigate_trial, jobs, ctx)
                records.append(_summarise(cfg, strategy, count, results, started, strategy,
                                          {"grid_size": n, "faulty_pes": count, "baseline": baseline,
                                           "trials": [r if isinstance(r, dict) else {"error": str(r)}
                                                      for r in results]}))
    else:
        for p, count in enumerate(_counts(cfg, n)):
            for th in cfg.thresholds:
                started = time.perf_counter()
                jobs = [("FaPIT", n, count, trial_seed(cfg.seed, p, k), float(th)) for k in range(cfg.trials)]
                results = _run_jobs(_mitigate_trial, jobs, ctx)
                records.append(_summarise(cfg, f"faulty_pes={count}", float(th), results, started, "FaPIT",
                                          {"grid_size": n, "faulty_pes": count, "baseline": baseline,
                                           "trials": [r if isinstance(r, dict) else {"error": str(r)}
                                                      for r in results]}))
    return records


def run_experiment(cfg: ExperimentConfig):
    """Execute ``cfg``; writes ``results.csv`` and ``records.json`` into ``cfg.output_dir``.

    Returns ``(records, ok)`` where ``ok`` is False if any trial failed.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    if cfg.mode == "train":
        records = run_train(cfg, out)
    elif cfg.mode.startswith("sweep"):
        records = run_sweep(cfg, out)
    else:
        records = run_mitigate(cfg, out)
    write_sweep_csv(out / "results.csv", records)
    with open(out / "records.json", "w") as f:
        json.dump([r.to_dict() for r in records], f, indent=1, default=_json_default)
    ok = all(not r.failures for r in records)
    return records, ok


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# -- CSV emission ------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else str(v)


def _write_csv(path, columns, rows):
    buf = io.StringIO()
    buf.write("# schema: " + ",".join(columns) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def write_sweep_csv(path, records):
    rows = []
    for r in records:
        accs = r.trial_accuracies
        rows.append([r.series, r.sweep_value, float(np.mean(accs)) if accs else float("nan"),
                     float(np.std(accs)) if accs else float("nan"), len(accs)])
    _write_csv(path, SWEEP_COLUMNS, rows)


REPORT_SCHEMAS = {
    "bit_location.csv": ["stuck_value", "bit", "mean_acc", "std_acc", "n_trials"],
    "faulty_pes.csv": ["series", "faulty_pes", "mean_acc", "std_acc", "n_trials"],
    "array_size.csv": ["series", "grid_size", "mean_acc", "std_acc", "n_trials"],
    "threshold_sweep.csv": ["faulty_pes", "v_threshold", "mean_acc", "std_acc", "n_trials"],
    "mitigation.csv": ["strategy", "faulty_pes", "mean_acc", "std_acc", "n_trials"],
    "epochs.csv": ["strategy", "faulty_pes", "trial", "epoch", "accuracy"],
    "thresholds.csv": ["strategy", "faulty_pes", "trial", "layer_index", "v_threshold"],
    "recovery.csv": ["strategy", "faulty_pes", "trial", "epochs_to_recovery"],
    "training_curve.csv": ["epoch", "loss", "accuracy"],
}


def emit_report(records, out_dir):
    """Write one tidy CSV per experiment type present in ``records``; returns the written paths."""
    if not records:
        raise ConfigurationError("no records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = {}

    def add(name, row):
        tables.setdefault(name, []).append(row)

    for r in records:
        r = r if isinstance(r, RunRecord) else RunRecord(**r)
        accs = r.trial_accuracies
        stats = [float(np.mean(accs)) if accs else float("nan"), float(np.std(accs)) if accs else float("nan"),
                 len(accs)]
        if r.mode == "sweep-bit":
            add("bit_location.csv", [int(r.series[2:]), r.sweep_value] + stats)
        elif r.mode == "sweep-count":
            add("faulty_pes.csv", [r.series, r.sweep_value] + stats)
        elif r.mode == "sweep-size":
            add("array_size.csv", [r.series, r.sweep_value] + stats)
        elif r.mode == "threshold-sweep":
            add("threshold_sweep.csv", [r.extra["faulty_pes"], r.sweep_value] + stats)
        elif r.mode == "mitigate":
            add("mitigation.csv", [r.strategy, r.sweep_value] + stats)
            for k, t in enumerate(r.extra.get("trials", [])):
                if "history" not in t:
                    continue
                for e, acc in enumerate(t["history"]):
                    add("epochs.csv", [r.strategy, r.sweep_value, k, e, float(acc)])
                for li, v in enumerate(t["v_thresholds"]):
                    add("thresholds.csv", [r.strategy, r.sweep_value, k, li, float(v)])
                add("recovery.csv", [r.strategy, r.sweep_value, k, t["epochs_to_recovery"]])
        elif r.mode == "train":
            for h in r.extra.get("history", []):
                add("training_curve.csv", [h["epoch"], float(h["loss"]), float(h["accuracy"])])
    paths = []
    for name, rows in tables.items():
        path = out / name
        _write_csv(path, REPORT_SCHEMAS[name], rows)
        paths.append(path)
    return paths


def load_records(paths):
    out = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(f"no run directory or records file at {p}")
        files = sorted(p.rglob("records.json")) if p.is_dir() else [p]
        for f in files:
            out.extend(RunRecord(**d) for d in json.loads(f.read_text()))
    return out
