import numpy as np
import pytest
from hypothesis import given, strategies as st

from snnfault.errors import ConfigurationError, StructuralError
from snnfault.faults import FaultMap, StuckAtFault, generate_fault_map
from snnfault.network import Conv, Linear, NetworkSpec, Plif, Pool, forward, init_params
from snnfault.systolic import (DenseQuantizedContract, FixedPointFormat, PEGrid, SystolicContract, WeightMapping,
                               accumulate, dequantize, faulty_linear, find_pruned_indices, mask_to_coords,
                               prune_masks_for, quantize, run_inference, scores_on_grid)

from oracle import brute_force_accumulate


def test_quantize_examples():
    q, n = quantize(np.array([0.0, 1.0, -0.5, 1e6, -1e6]))
    assert list(q) == [0, 65536, -32768, 2 ** 31 - 1, -2 ** 31]
    assert n == 2
    with pytest.raises(ConfigurationError):
        quantize(np.array([np.nan]))


@given(st.lists(st.floats(-1000, 1000), min_size=1, max_size=30), st.integers(0, 20))
def test_quantization_error_bound(ws, fb):
    fmt = FixedPointFormat(fb)
    w = np.array(ws)
    q, n = quantize(w, fmt)
    if n == 0:
        assert np.all(np.abs(dequantize(q, fmt) - w) <= 2.0 ** (-fb - 1))


def test_two_by_two_msb_trace():
    fmap = FaultMap(2, (StuckAtFault(0, 0, 30, 1),))
    out = faulty_linear(np.zeros((4, 4)), np.array([1, 0, 0, 0]), PEGrid(fmap), WeightMapping(2))
    np.testing.assert_array_equal(out, [16384.0, 0.0, 16384.0, 0.0])


def test_pruned_indices_example():
    fmap = FaultMap(2, (StuckAtFault(0, 1, 31, 1),))
    masks = find_pruned_indices({"w": (4, 4)}, fmap)
    assert mask_to_coords(masks["w"]) == {(0, 1), (0, 3), (2, 1), (2, 3)}
    assert mask_to_coords(find_pruned_indices({"w": (4, 4)}, FaultMap(2))["w"]) == set()
    full = FaultMap(2, tuple(StuckAtFault(r, c, 0, 1) for r in range(2) for c in range(2)))
    assert find_pruned_indices({"w": (3, 5)}, full)["w"].all()


def test_all_bypassed_gives_zero(rng):
    fmap = FaultMap(3, tuple(StuckAtFault(r, c, 31, 1) for r in range(3) for c in range(3)))
    out = faulty_linear(rng.normal(size=(5, 7)), np.ones(7), PEGrid.bypass_faulty(fmap))
    assert np.all(out == 0)


def test_healthy_grid_is_quantized_matvec(rng):
    w = rng.normal(size=(9, 13))
    s = (rng.random(13) < 0.5).astype(float)
    q, _ = quantize(w)
    np.testing.assert_array_equal(faulty_linear(w, s, PEGrid.healthy(4)), dequantize(q @ s))


def test_non_binary_input_rejected():
    with pytest.raises(StructuralError):
        faulty_linear(np.zeros((2, 2)), np.array([0.5, 1.0]), PEGrid.healthy(2))


def test_only_faulty_pes_can_be_bypassed():
    with pytest.raises(ConfigurationError):
        PEGrid(FaultMap(2), np.ones((2, 2), dtype=bool))


@given(st.integers(1, 6), st.integers(1, 9), st.integers(1, 14), st.integers(0, 2 ** 31), st.data())
def test_fast_accumulate_matches_column_walk(n, n_out, n_in, seed, data):
    rng = np.random.default_rng(seed)
    wq = rng.integers(-(1 << 31), 1 << 31, size=(n_out, n_in))
    if data.draw(st.booleans()):
        wq = wq >> 12
    spikes = (rng.random((3, n_in)) < 0.6).astype(np.int64)
    fmap = generate_fault_map(n, data.draw(st.integers(0, n * n)), ("random",), seed)
    bypass = fmap.masks()[2] & (rng.random((n, n)) < 0.5)
    grid = PEGrid(fmap, bypass)
    faults = {pe: [(f.bit, f.stuck_value) for f in fs] for pe, fs in fmap.by_pe().items()}
    skip = {tuple(p) for p in np.argwhere(bypass)}
    got = accumulate(wq, spikes, grid)
    for m in range(3):
        assert list(got[m]) == brute_force_accumulate(wq, spikes[m], n, faults, skip)


def tiny_net():
    return NetworkSpec((1, 6, 6), (Conv(1, 3, 3), Plif(), Pool(2), Conv(3, 4, 3), Plif(), Linear(36, 5), Plif()), 4)


def test_healthy_network_matches_dense_reference(rng):
    spec = tiny_net()
    params = init_params(spec, seed=1, gain=3.0)
    x = rng.random((4, 1, 6, 6))
    a = scores_on_grid(spec, params, PEGrid.healthy(5), x)
    b, _ = forward(spec, params, x, contract=DenseQuantizedContract())
    np.testing.assert_array_equal(a, b)


def test_bypass_matches_pruning(rng):
    spec = tiny_net()
    params = init_params(spec, seed=2, gain=3.0)
    x = rng.random((4, 1, 6, 6))
    fmap = generate_fault_map(5, 9, ("random",), seed=3)
    a = scores_on_grid(spec, params, PEGrid.bypass_faulty(fmap), x)
    lowered = spec.lowered_shapes()
    prune = find_pruned_indices({i: lowered[i] for i in spec.array_layers()}, fmap)
    b, _ = forward(spec, params, x, contract=DenseQuantizedContract(prune=prune))
    np.testing.assert_array_equal(a, b)
    masks = prune_masks_for(spec, fmap)
    assert set(masks) == {f"{i}.weight" for i in spec.array_layers()}
    assert all(masks[k].shape == params[k].shape for k in masks)


def test_msb_fault_changes_scores_and_counts_clamps(rng):
    spec = tiny_net()
    params = init_params(spec, seed=2, gain=3.0)
    x = rng.random((6, 1, 6, 6))
    y = rng.integers(0, 5, 6)
    full = FaultMap(5, tuple(StuckAtFault(r, c, 31, 1) for r in range(5) for c in range(5)))
    assert np.all(scores_on_grid(spec, params, PEGrid(full), x) == 0)  # every array sum pinned negative
    contract = SystolicContract(PEGrid.healthy(5))
    params["0.weight"] = params["0.weight"] * 1e6
    forward(spec, params, x, contract=contract)
    assert contract.clamped > 0
    assert 0.0 <= run_inference(spec, params, PEGrid.healthy(5), x, y) <= 1.0
