"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 1-3 are self-contained property checks. Criteria 4-9 share one
baseline model trained on the bundled MNIST subset; it is trained once per
session (and cached under ``runs/acceptance`` keyed by its config hash) unless
``SNNFAULT_FRESH=1`` forces retraining.
"""
import shutil
import time

import numpy as np
import pytest

from snnfault.faults import generate_fault_map
from snnfault.harness import load_records, run_experiment
from snnfault.network import forward
from snnfault.systolic import DenseQuantizedContract, PEGrid, find_pruned_indices, scores_on_grid
from snnfault.train import TrainConfig, backward

from acceptance_support import RUNS, fresh, load_config, random_input, random_small_net, rel_close, report, tiny_grad_net
from oracle import finite_difference_grads, min_kink_distance


def test_criterion_1_oracle_equivalence():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(100):
        spec, params = random_small_net(rng)
        x = random_input(spec, rng, int(rng.integers(1, 5)))
        grid = PEGrid.healthy(int(rng.integers(1, 9)))
        a = scores_on_grid(spec, params, grid, x)
        b, _ = forward(spec, params, x, contract=DenseQuantizedContract())
        mismatches += not np.array_equal(a, b)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 60
    report(1, ok, f"{100 - mismatches}/100 nets bit-identical to the dense quantized reference in {elapsed:.1f}s")
    assert ok


def test_criterion_2_bypass_pruning_equivalence():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    mismatches = 0
    for k in range(100):
        spec, params = random_small_net(rng)
        x = random_input(spec, rng, int(rng.integers(1, 5)))
        n = int(rng.integers(1, 9))
        fmap = generate_fault_map(n, int(rng.integers(0, n * n + 1)), ("random",), seed=k)
        a = scores_on_grid(spec, params, PEGrid.bypass_faulty(fmap), x)
        lowered = spec.lowered_shapes()
        on_array = spec.array_layers(spiking_input=x.ndim == len(spec.input_shape) + 2)
        prune = find_pruned_indices({i: lowered[i] for i in on_array}, fmap)
        b, _ = forward(spec, params, x, contract=DenseQuantizedContract(prune=prune))
        mismatches += not np.array_equal(a, b)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 60
    report(2, ok, f"{100 - mismatches}/100 fault maps bit-identical to pruned dense evaluation in {elapsed:.1f}s")
    assert ok


def test_criterion_3_gradient_checks():
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    checked = failed = resampled = 0
    worst = 0.0
    while checked < 50:
        spec, params, oracle = tiny_grad_net(rng)
        batch = int(rng.integers(1, 4))
        x = rng.uniform(0, 1.5, (batch,) + spec.input_shape)
        y = rng.integers(0, spec.num_classes, batch)
        keys = [k for k in params if k.endswith((".weight", ".tau_param", ".v_threshold"))]
        fd, base = finite_difference_grads(oracle, params, x, y, spec.time_steps, 1.0, keys)
        if min_kink_distance(base) < 1e-3:
            resampled += 1
            continue
        _, state = forward(spec, params, x)
        grads = backward(spec, params, state, y, TrainConfig(gamma=1.0)).grads
        checked += 1
        bad = [k for k in keys if not rel_close(grads[k], fd[k])]
        failed += bool(bad)
        for k in keys:
            err = np.abs(grads[k] - fd[k])
            scale = np.maximum(np.maximum(np.abs(grads[k]), np.abs(fd[k])), 1e-3)
            worst = max(worst, float(np.max(err / scale)))
    elapsed = time.perf_counter() - start
    ok = failed == 0 and elapsed < 60
    report(3, ok, f"{checked - failed}/50 tiny nets match central differences (worst rel err {worst:.1e}, "
                  f"{resampled} kink-adjacent draws resampled) in {elapsed:.1f}s")
    assert ok


# -- criteria on the desk-scale MNIST model ---------------------------------------



@pytest.fixture(scope="session")
def baseline():
    """Train (or reuse the cached) desk baseline; returns (record, checkpoint path)."""
    cfg = load_config("baseline", output_dir=str(RUNS / "baseline"))
    out = RUNS / f"baseline-{cfg.config_hash()}"
    ckpt = out / "model.ckpt"
    if fresh() or not ckpt.exists():
        shutil.rmtree(out, ignore_errors=True)
        cfg.output_dir = str(out)
        records, ok = run_experiment(cfg)
        assert ok
    record = load_records([out / "records.json"])[0]
    return record, ckpt


def test_criterion_4_baseline_training(baseline):
    record, _ = baseline
    history = record.extra["history"]
    final = history[-1]["accuracy"]
    ok = final >= 0.95 and len(history) <= 20 and record.wall_clock_seconds < 600
    report(4, ok, f"final eval accuracy {final:.3f} after {len(history)} epochs "
                  f"(best {max(h['accuracy'] for h in history):.3f}), training wall clock "
                  f"{record.wall_clock_seconds:.0f}s")
    assert ok


def _sweep(name, ckpt, tag, **kw):
    cfg = load_config(name, checkpoint=str(ckpt), output_dir=str(RUNS / tag), **kw)
    records, ok = run_experiment(cfg)
    assert ok
    return {(r.series, r.sweep_value): r for r in records}, RUNS / tag / "results.csv"


VULN = dict(sweep_bit=dict(bits=[0, 31], stuck_values=[0, 1], fault_percents=[0.2]),
            sweep_size=dict(grid_sizes=[8, 64], fault_counts=[4], stuck_values=[1]))


@pytest.fixture(scope="session")
def vulnerability(baseline):
    _, ckpt = baseline
    start = time.perf_counter()
    bit, bit_csv = _sweep("sweep_bit", ckpt, "vuln_bit", **VULN["sweep_bit"])
    size, size_csv = _sweep("sweep_size", ckpt, "vuln_size", **VULN["sweep_size"])
    elapsed = time.perf_counter() - start
    clean = next(iter(bit.values())).extra["baseline"]
    return dict(bit=bit, size=size, clean=clean, elapsed=elapsed, csvs=[bit_csv, size_csv])


def test_criterion_5_vulnerability_trends(vulnerability):
    v = vulnerability
    clean = v["clean"]
    msb1 = v["bit"][("sa1", 31)].mean_accuracy
    lsb1 = v["bit"][("sa1", 0)].mean_accuracy
    msb0 = v["bit"][("sa0", 31)].mean_accuracy
    small = v["size"][("b31_sa1", 8)].mean_accuracy
    large = v["size"][("b31_sa1", 64)].mean_accuracy
    a = (clean - msb1) >= 0.30 and (clean - lsb1) <= 0.02
    b = (clean - msb1) >= (clean - msb0)
    c = (clean - small) - (clean - large) >= 0.10
    fast = v["elapsed"] < 1800
    detail = (f"fault-free {clean:.3f}; (a) bit31 sa1 drop {clean - msb1:+.3f} (need >= 0.30), bit0 sa1 drop "
              f"{clean - lsb1:+.3f} (need <= 0.02) -> {'ok' if a else 'no'}; (b) sa1 drop {clean - msb1:+.3f} vs "
              f"sa0 drop {clean - msb0:+.3f} -> {'ok' if b else 'no'}; (c) 8x8 drop {clean - small:+.3f} vs 64x64 "
              f"drop {clean - large:+.3f} -> {'ok' if c else 'no'}; {v['elapsed']:.0f}s")
    ok = a and b and c and fast
    report(5, ok, detail)
    assert ok


@pytest.fixture(scope="session")
def mitigation(baseline):
    _, ckpt = baseline
    cfg = load_config("mitigate", checkpoint=str(ckpt), output_dir=str(RUNS / "mitigate"))
    start = time.perf_counter()
    records, ok = run_experiment(cfg)
    assert ok
    return {r.strategy: r for r in records}, time.perf_counter() - start, cfg


def test_criterion_6_mitigation_ordering(mitigation):
    runs, elapsed, cfg = mitigation
    base = runs["FaP"].extra["baseline"]
    per_trial = {s: [t["accuracy"] for t in runs[s].extra["trials"]] for s in runs}
    mean = {s: float(np.mean(v)) for s, v in per_trial.items()}
    ordered = mean["FalVolt"] >= mean["FaPIT"] >= mean["FaP"]
    close = base - mean["FalVolt"] <= 0.02
    ok = ordered and close and elapsed < 2700
    report(6, ok, f"baseline {base:.3f}; mean final accuracy FaP {mean['FaP']:.3f}, FaPIT {mean['FaPIT']:.3f}, "
                  f"FalVolt {mean['FalVolt']:.3f} over {len(per_trial['FaP'])} paired fault maps at "
                  f"{cfg.fault_percents[0]}% faulty PEs; ordering {'ok' if ordered else 'violated'}, FalVolt gap "
                  f"{base - mean['FalVolt']:+.3f} (need <= 0.02); {elapsed:.0f}s")
    assert ok


def _recovery(trial, budget):
    # a run that never re-enters the band is censored at budget + 1 epochs
    e = trial["epochs_to_recovery"]
    return budget + 1 if e is None else e


def test_criterion_7_recovery_speedup(mitigation):
    runs, _, cfg = mitigation
    budget = cfg.retrain_epochs
    fapit = [_recovery(t, budget) for t in runs["FaPIT"].extra["trials"]]
    falvolt = [_recovery(t, budget) for t in runs["FalVolt"].extra["trials"]]
    ratio = float(np.mean(fapit)) / float(np.mean(falvolt)) if np.mean(falvolt) > 0 else float("nan")
    ok = bool(ratio >= 1.5) and all(e <= budget for e in falvolt)
    report(7, ok, f"epochs to recovery (tolerance {cfg.recovery_tolerance:.2f}) FaPIT {fapit} vs FalVolt "
                  f"{falvolt}; ratio of means {ratio:.2f} (need >= 1.5; {budget + 1} = not recovered within "
                  f"{budget} epochs)")
    assert ok


def test_criterion_8_pruned_weights_stay_zero(mitigation):
    runs, _, _ = mitigation
    flags = [f for s in ("FaPIT", "FalVolt") for t in runs[s].extra["trials"] for f in t["pruned_zero_ok"]]
    ok = len(flags) > 0 and all(flags)
    report(8, ok, f"{sum(flags)}/{len(flags)} post-epoch checks kept every pruned weight at exactly zero")
    assert ok


def test_criterion_9_determinism(vulnerability, baseline):
    _, ckpt = baseline
    _, bit_csv = _sweep("sweep_bit", ckpt, "vuln_bit_repeat", **VULN["sweep_bit"])
    _, size_csv = _sweep("sweep_size", ckpt, "vuln_size_repeat", **VULN["sweep_size"])
    same = [a.read_bytes() == b.read_bytes() for a, b in zip(vulnerability["csvs"], [bit_csv, size_csv])]
    ok = all(same)
    report(9, ok, f"{sum(same)}/{len(same)} repeated sweep CSVs byte-identical")
    assert ok
