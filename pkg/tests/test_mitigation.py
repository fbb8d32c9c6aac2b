import numpy as np
import pytest

from snnfault.errors import ConfigurationError
from snnfault.faults import generate_fault_map
from snnfault.mitigation import MitigationPlan, epochs_to_recovery, fap, falvolt, fapit, run_strategy
from snnfault.network import Linear, NetworkSpec, Plif, init_params
from snnfault.systolic import PEGrid, prune_masks_for, run_inference
from snnfault.train import TrainConfig, zero_pruned


def test_epochs_to_recovery():
    assert epochs_to_recovery([0.5, 0.8, 0.94, 0.97], 0.95, 0.01) == 2
    assert epochs_to_recovery([0.96], 0.95, 0.01) == 0
    assert epochs_to_recovery([0.1, 0.2], 0.95, 0.01) is None
    with pytest.raises(ConfigurationError):
        epochs_to_recovery([], 0.9, 0.01)


def test_plan_invariants():
    off, on = TrainConfig(), TrainConfig(optimize_threshold=True)
    MitigationPlan("FaP", 0, off, {})
    with pytest.raises(ConfigurationError):
        MitigationPlan("FaP", 3, off, {})
    with pytest.raises(ConfigurationError):
        MitigationPlan("FaPIT", 3, on, {})
    with pytest.raises(ConfigurationError):
        MitigationPlan("FalVolt", 3, off, {})
    with pytest.raises(ConfigurationError):
        MitigationPlan("Other", 0, off, {})


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 90)
    protos = rng.normal(size=(3, 12))
    x = protos[y] + 0.3 * rng.normal(size=(90, 12))
    spec = NetworkSpec((12,), (Linear(12, 16), Plif(), Linear(16, 3), Plif()), 4)
    return spec, init_params(spec, seed=0, gain=2.0), x, y, generate_fault_map(4, 5, seed=1)


def test_fap_prunes_without_training(toy):
    spec, params, x, y, fmap = toy
    out = fap(spec, params, fmap, (x, y), baseline=1.0, tolerance=0.0)
    masks = prune_masks_for(spec, fmap)
    assert list(masks) == ["2.weight"]
    assert np.all(out.params["2.weight"][masks["2.weight"]] == 0)
    assert out.history == [out.accuracy] and out.pruned_zero_ok == [True]
    assert out.accuracy == run_inference(spec, zero_pruned(params, masks), PEGrid.bypass_faulty(fmap), x, y)


@pytest.mark.parametrize("strategy", ["FaPIT", "FalVolt"])
def test_retraining_history_and_invariant(toy, strategy):
    spec, params, x, y, fmap = toy
    params = dict(params, **{"1.v_threshold": np.array(1.3)})
    cfg = TrainConfig(learning_rate=1.0, epochs=3, batch_size=30)
    out = run_strategy(strategy, spec, params, fmap, (x, y), (x, y), cfg, baseline=1.0, tolerance=0.5)
    assert out.strategy == strategy
    assert len(out.history) == 4 and len(out.threshold_history) == 4 and len(out.losses) == 3
    assert all(out.pruned_zero_ok) and len(out.pruned_zero_ok) == 4
    # thresholds restart at 1.0 before retraining
    assert out.threshold_history[0] == [1.0, 1.0]
    moved = any(t != [1.0, 1.0] for t in out.threshold_history[1:])
    assert moved == (strategy == "FalVolt")


def test_zero_epochs_falvolt_equals_fap(toy):
    spec, params, x, y, fmap = toy
    a = fap(spec, params, fmap, (x, y))
    b = falvolt(spec, params, fmap, (x, y), (x, y), TrainConfig(epochs=0, optimize_threshold=True))
    assert a.accuracy == b.accuracy


def test_strategy_flag_mismatch(toy):
    spec, params, x, y, fmap = toy
    with pytest.raises(ConfigurationError):
        falvolt(spec, params, fmap, (x, y), (x, y), TrainConfig(epochs=1))
    with pytest.raises(ConfigurationError):
        fapit(spec, params, fmap, (x, y), (x, y), TrainConfig(epochs=1, optimize_threshold=True))
