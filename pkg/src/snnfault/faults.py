"""Stuck-at faults on PE accumulator outputs and random fault maps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigurationError, FormatError

WORD_BITS = 32
MSB = WORD_BITS - 1


@dataclass(frozen=True, order=True)
class StuckAtFault:
    pe_row: int
    pe_col: int
    bit: int
    stuck_value: int

    def __post_init__(self):
        if not 0 <= self.bit < WORD_BITS:
            raise ConfigurationError(f"bit {self.bit} outside [0, {WORD_BITS})")
        if self.stuck_value not in (0, 1):
            raise ConfigurationError("stuck_value must be 0 or 1")
        if self.pe_row < 0 or self.pe_col < 0:
            raise ConfigurationError("negative PE coordinate")

    @property
    def pe(self):
        return (self.pe_row, self.pe_col)


@dataclass(frozen=True)
class FaultMap:
    grid_size: int
    faults: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.grid_size <= 0:
            raise ConfigurationError("grid_size must be positive")
        faults = tuple(sorted(set(self.faults)))
        seen = set()
        for f in faults:
            if f.pe_row >= self.grid_size or f.pe_col >= self.grid_size:
                raise ConfigurationError(f"fault {f} outside a {self.grid_size}x{self.grid_size} grid")
            key = (f.pe_row, f.pe_col, f.bit)
            if key in seen:
                raise ConfigurationError(f"conflicting faults on PE {f.pe} bit {f.bit}")
            seen.add(key)
        object.__setattr__(self, "faults", faults)

    def __len__(self):
        return len(self.faults)

    @property
    def faulty_pes(self):
        return sorted({f.pe for f in self.faults})

    def by_pe(self):
        out = {}
        for f in self.faults:
            out.setdefault(f.pe, []).append(f)
        return out

    def masks(self):
        """Per-PE ``(or_mask, and_mask)`` arrays (uint32, N x N) and a faulty-PE boolean grid."""
        n = self.grid_size
        or_mask = np.zeros((n, n), dtype=np.uint32)
        clear = np.zeros((n, n), dtype=np.uint32)
        faulty = np.zeros((n, n), dtype=bool)
        for f in self.faults:
            bit = np.uint32(1 << f.bit)
            if f.stuck_value:
                or_mask[f.pe_row, f.pe_col] |= bit
            else:
                clear[f.pe_row, f.pe_col] |= bit
            faulty[f.pe_row, f.pe_col] = True
        return or_mask, ~clear, faulty

    # -- text format -----------------------------------------------------------
    def dumps(self):
        lines = [f"N {self.grid_size} seed {self.seed}"]
        lines += [f"{f.pe_row} {f.pe_col} {f.bit} {f.stuck_value}" for f in self.faults]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise FormatError("empty fault map")
        head = lines[0].split()
        if len(head) != 4 or head[0] != "N" or head[2] != "seed":
            raise FormatError(f"bad fault map header: {lines[0]!r}")
        faults = []
        for no, ln in enumerate(lines[1:], start=2):
            parts = ln.split()
            if len(parts) != 4:
                raise FormatError(f"line {no}: expected 'row col bit value', got {ln!r}")
            faults.append(StuckAtFault(*map(int, parts)))
        return cls(int(head[1]), tuple(faults), int(head[3]))

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.loads(f.read())


def _to_unsigned(x):
    return np.asarray(x, dtype=np.int64) & 0xFFFFFFFF


def _to_signed(u):
    u = np.asarray(u, dtype=np.int64)
    return np.where(u & 0x80000000, u - (1 << 32), u)


def apply_masks(words, or_mask, and_mask):
    """Vectorised stuck-at masking of signed 32-bit words held in int64 arrays."""
    u = _to_unsigned(words)
    u = (u & np.asarray(and_mask, dtype=np.int64)) | np.asarray(or_mask, dtype=np.int64)
    return _to_signed(u)


def inject_word(value: int, faults_at_pe: Iterable[StuckAtFault]) -> int:
    """Force each faulty bit of a signed 32-bit word to its stuck value."""
    faults_at_pe = list(faults_at_pe)
    if len({f.pe for f in faults_at_pe}) > 1:
        raise ConfigurationError("inject_word takes faults of a single PE")
    u = int(value) & 0xFFFFFFFF
    for f in faults_at_pe:
        if f.stuck_value:
            u |= 1 << f.bit
        else:
            u &= ~(1 << f.bit) & 0xFFFFFFFF
    return u - (1 << 32) if u & 0x80000000 else u


def percent_to_count(n, percent):
    if not 0 <= percent <= 100:
        raise ConfigurationError(f"percent {percent} outside [0, 100]")
    return int(np.floor(percent / 100.0 * n * n + 0.5))


def generate_fault_map(n, faulty_pe_count, bit_policy=("fixed", MSB, 1), seed=0):
    """Pick ``faulty_pe_count`` distinct PEs uniformly without replacement, one fault each.

    ``bit_policy`` is ``("fixed", bit, value)`` or ``("random",)`` (uniform bit
    and stuck value per PE).
    """
    if n <= 0:
        raise ConfigurationError("grid size must be positive")
    if not 0 <= faulty_pe_count <= n * n:
        raise ConfigurationError(f"cannot place {faulty_pe_count} faulty PEs on a {n}x{n} grid")
    rng = np.random.default_rng(seed)
    flat = rng.choice(n * n, size=faulty_pe_count, replace=False)
    if bit_policy[0] == "fixed":
        _, bit, value = bit_policy
        bits = np.full(faulty_pe_count, bit)
        values = np.full(faulty_pe_count, value)
    elif bit_policy[0] == "random":
        bits = rng.integers(0, WORD_BITS, faulty_pe_count)
        values = rng.integers(0, 2, faulty_pe_count)
    else:
        raise ConfigurationError(f"unknown bit policy {bit_policy!r}")
    faults = tuple(StuckAtFault(int(p // n), int(p % n), int(b), int(v)) for p, b, v in zip(flat, bits, values))
    return FaultMap(n, faults, seed)
