"""Functional model of an N x N systolic SNN accelerator.

Each weighted layer is lowered to an ``(out, in)`` matrix; weight ``(r, c)`` is
pre-stored in PE ``(r mod N, c mod N)``. For one input vector, output ``r`` is
a column walk: the 32-bit partial sum visits the spiking inputs ``c`` in
ascending order, the PE holding ``(r, c)`` adds its weight, and a faulty PE
then forces its stuck bits on the partial sum it just produced. Bypassed PEs
contribute nothing and inject nothing. Adds wrap modulo 2**32 like a hardware
adder.

Only the synaptic accumulation is fixed point; membrane dynamics and pooling
stay in floating point.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, StructuralError
from .faults import FaultMap, apply_masks
from .network import NetworkSpec, accuracy, forward

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1


@dataclass(frozen=True)
class FixedPointFormat:
    fraction_bits: int = 16
    total_bits: int = field(default=32, init=False)

    def __post_init__(self):
        if not 0 <= self.fraction_bits <= 31:
            raise ConfigurationError("fraction_bits must lie in [0, 31]")

    @property
    def scale(self):
        return float(1 << self.fraction_bits)


def quantize(weights, fmt=FixedPointFormat()):
    """Round to the nearest multiple of 2**-fraction_bits and clamp to int32.

    Returns ``(words, n_clamped)``; ``words`` is an int64 array holding int32 values.
    Ties round to even.
    """
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ConfigurationError("cannot quantize non-finite weights")
    scaled = np.rint(w * fmt.scale)
    clamped = int(np.count_nonzero((scaled < INT32_MIN) | (scaled > INT32_MAX)))
    return np.clip(scaled, INT32_MIN, INT32_MAX).astype(np.int64), clamped


def dequantize(words, fmt=FixedPointFormat()):
    return np.asarray(words, dtype=np.float64) / fmt.scale


def wrap32(x):
    x = np.asarray(x, dtype=np.int64)
    return ((x - INT32_MIN) & 0xFFFFFFFF) + INT32_MIN


@dataclass(frozen=True)
class WeightMapping:
    """Block-cyclic placement: weight ``(r, c)`` lives in PE ``(r mod N, c mod N)``."""

    grid_size: int

    def pe_of(self, r, c):
        return (r % self.grid_size, c % self.grid_size)

    def pe_grid(self, shape):
        out, inp = shape
        return np.arange(out)[:, None] % self.grid_size, np.arange(inp)[None, :] % self.grid_size


class PEGrid:
    def __init__(self, fault_map: FaultMap, bypass=None, fmt=FixedPointFormat()):
        n = fault_map.grid_size
        self.fault_map = fault_map
        self.fmt = fmt
        self.or_mask, self.and_mask, self.faulty = fault_map.masks()
        if bypass is None:
            bypass = np.zeros((n, n), dtype=bool)
        bypass = np.asarray(bypass, dtype=bool)
        if bypass.shape != (n, n):
            raise StructuralError(f"bypass must be {n}x{n}")
        if np.any(bypass & ~self.faulty):
            raise ConfigurationError("only faulty PEs may be bypassed")
        self.bypass = bypass
        self.bypass.setflags(write=False)

    @property
    def size(self):
        return self.fault_map.grid_size

    @classmethod
    def healthy(cls, n, fmt=FixedPointFormat()):
        return cls(FaultMap(n), fmt=fmt)

    @classmethod
    def bypass_faulty(cls, fault_map, fmt=FixedPointFormat()):
        """Grid with every faulty PE routed through its bypass multiplexer."""
        return cls(fault_map, fault_map.masks()[2], fmt)


def accumulate(wq, spikes, grid: PEGrid, mapping: Optional[WeightMapping] = None, chunk=1 << 22):
    """Fault-perturbed column sums for a batch of binary input vectors.

    ``wq`` is an int (out, in) word matrix, ``spikes`` a binary (M, in) matrix.
    Returns wrapped int32 sums as an int64 (M, out) array.
    """
    n = grid.size
    mapping = mapping or WeightMapping(n)
    if mapping.grid_size != n:
        raise StructuralError("mapping and grid disagree on the grid size")
    wq = np.asarray(wq, dtype=np.int64)
    spikes = np.asarray(spikes)
    n_out, n_in = wq.shape
    if spikes.ndim != 2 or spikes.shape[1] != n_in:
        raise StructuralError(f"spikes {spikes.shape} do not match weights {wq.shape}")
    pr, pc = mapping.pe_grid(wq.shape)
    w_eff = np.where(grid.bypass[pr, pc], 0, wq)
    # Exact: |partial sums| < n_in * 2**31 stays far below 2**53.
    out = wrap32(np.rint(spikes.astype(np.float64) @ w_eff.T.astype(np.float64)).astype(np.int64))

    live = grid.faulty & ~grid.bypass
    for pe_row in np.flatnonzero(live.any(axis=1)):
        rows = np.arange(pe_row, n_out, n)
        if rows.size == 0:
            continue
        fault_cols = np.flatnonzero(live[pe_row][np.arange(n_in) % n])
        if fault_cols.size == 0:
            continue
        step = max(1, chunk // (rows.size * n_in))
        for s in range(0, spikes.shape[0], step):
            sp = spikes[s:s + step]
            prefix = np.cumsum(sp[:, None, :].astype(np.int64) * w_eff[rows][None, :, :], axis=2)
            acc = np.zeros((sp.shape[0], rows.size), dtype=np.int64)
            prev = np.zeros_like(acc)
            for c in fault_cols:
                acc = wrap32(acc + prefix[:, :, c] - prev)
                prev = prefix[:, :, c]
                fired = sp[:, c] != 0
                if fired.any():
                    pe_col = c % n
                    acc[fired] = apply_masks(acc[fired], grid.or_mask[pe_row, pe_col], grid.and_mask[pe_row, pe_col])
            out[s:s + step, rows] = wrap32(acc + prefix[:, :, -1] - prev)
    return out


def _check_binary(x):
    if not np.all((x == 0) | (x == 1)):
        raise StructuralError("systolic array input must be binary spikes")


def faulty_linear(weights, input_spikes, grid: PEGrid, mapping: Optional[WeightMapping] = None):
    """Real-valued output of a lowered layer computed on the (possibly faulty) grid."""
    x = np.asarray(input_spikes)
    single = x.ndim == 1
    x = x[None, :] if single else x
    _check_binary(x)
    wq, _ = quantize(weights, grid.fmt)
    out = dequantize(accumulate(wq, x, grid, mapping), grid.fmt)
    return out[0] if single else out


def find_pruned_indices(shapes, fault_map: FaultMap, mapping: Optional[WeightMapping] = None, bypass=None):
    """Boolean mask per layer of the lowered weights that sit on faulty (or bypassed) PEs.

    ``shapes`` maps a layer key to its lowered ``(out, in)`` shape.
    """
    mapping = mapping or WeightMapping(fault_map.grid_size)
    bad = fault_map.masks()[2]
    if bypass is not None:
        bad = bad | np.asarray(bypass, dtype=bool)
    out = {}
    for key, shape in shapes.items():
        pr, pc = mapping.pe_grid(shape)
        out[key] = bad[pr, pc]
    return out


def mask_to_coords(mask):
    return {tuple(int(v) for v in ix) for ix in np.argwhere(mask)}


def prune_masks_for(spec: NetworkSpec, fault_map: FaultMap, mapping=None, spiking_input=False):
    """Pruning masks keyed by parameter name (``"{layer}.weight"``), shaped like the weights."""
    lowered = spec.lowered_shapes()
    on_array = spec.array_layers(spiking_input)
    masks = find_pruned_indices({i: lowered[i] for i in on_array}, fault_map, mapping)
    out = {}
    for i, m in masks.items():
        layer = spec.layers[i]
        shape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size) \
            if hasattr(layer, "out_channels") else m.shape
        out[f"{i}.weight"] = m.reshape(shape)
    return out


class SystolicContract:
    """Contraction backend for :func:`snnfault.network.forward` that runs array layers on a PE grid.

    Off-array layers (the analog encoder) use the same quantised weights but plain
    floating-point products.
    """

    def __init__(self, grid: PEGrid, mapping: Optional[WeightMapping] = None):
        self.grid = grid
        self.mapping = mapping or WeightMapping(grid.size)
        self.clamped = 0

    def __call__(self, layer_index, w2d, cols, on_array):
        wq, clamped = quantize(w2d, self.grid.fmt)
        self.clamped += clamped
        if not on_array:
            return cols @ dequantize(wq, self.grid.fmt).T
        _check_binary(cols)
        return dequantize(accumulate(wq, cols, self.grid, self.mapping), self.grid.fmt)


class DenseQuantizedContract:
    """Reference backend: integer matmul on quantised weights, optionally with pruned weights zeroed."""

    def __init__(self, fmt=FixedPointFormat(), prune=None):
        self.fmt = fmt
        self.prune = prune or {}

    def __call__(self, layer_index, w2d, cols, on_array):
        wq, _ = quantize(w2d, self.fmt)
        if layer_index in self.prune:
            wq = np.where(self.prune[layer_index], 0, wq)
        if not on_array:
            return cols @ dequantize(wq, self.fmt).T
        sums = np.einsum("mi,oi->mo", cols.astype(np.int64), wq)
        return dequantize(wrap32(sums), self.fmt)


def scores_on_grid(spec, params, grid: PEGrid, x, mapping=None, batch_size=256):
    contract = SystolicContract(grid, mapping)
    out = [forward(spec, params, x[s:s + batch_size], contract=contract)[0] for s in range(0, len(x), batch_size)]
    return np.concatenate(out)


def run_inference(spec, params, grid: PEGrid, x, y, mapping=None, batch_size=256):
    """Top-1 accuracy of the network evaluated on the PE grid."""
    return accuracy(spec, params, x, y, batch_size, contract=SystolicContract(grid, mapping))
