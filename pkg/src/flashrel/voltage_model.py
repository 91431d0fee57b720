"""Threshold-voltage model: state bit maps, calibrated distribution lookup,
drift composition, sampling, and read-reference placement.

Voltages live on a signed normalized scale (nominal max 512) and are
quantized to 1/64-unit fixed point wherever they are stored or compared, so
every simulation is bit-reproducible across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .calibration import (
    AXES,
    AXIS_DISTURB,
    AXIS_PEC,
    AXIS_RETENTION,
    DAY_S,
    N_STATES,
    STATE_NAMES,
    TableRow,
    default_rows,
    state_index,
)

FP_SCALE = 64
VOLT_MIN = -160.0
VOLT_MAX = 520.0

BASELINE_PEC = 2000.0
BASELINE_RETENTION_S = DAY_S
BASELINE_READS = 1.0

_VAR_EPS = 1e-9
_SIGMA_FLOOR_FRAC = 0.5

MODES = ("slc", "mlc", "tlc")
BITS_PER_CELL = {"slc": 1, "mlc": 2, "tlc": 3}

# Mode states are mapped onto calibration rows so that every mode reuses the
# measured distributions: MLC keeps every second programmed row, SLC the two
# extremes. The MLC selection equals the state subset a capacity-downgraded
# block programs, so downgraded blocks need no second calibration source.
MODE_TABLE_ROWS = {"slc": (0, 7), "mlc": (0, 3, 5, 7), "tlc": tuple(range(8))}

# Bit labels per state, most-significant page first. Adjacent states differ
# in exactly one bit, and the per-page flip counts (1/2/4 for LSB/CSB/MSB in
# TLC) decide how many references each page read needs.
TLC_BITS = (
    (1, 1, 1),  # ER
    (0, 1, 1),  # P1
    (0, 0, 1),  # P2
    (1, 0, 1),  # P3
    (1, 0, 0),  # P4
    (0, 0, 0),  # P5
    (0, 1, 0),  # P6
    (1, 1, 0),  # P7
)
MLC_BITS = ((1, 1), (0, 1), (0, 0), (1, 0))
SLC_BITS = ((1,), (0,))
MODE_BITS = {"slc": SLC_BITS, "mlc": MLC_BITS, "tlc": TLC_BITS}

# Reference indices (into the mode's full ReadRefSet) needed to resolve one
# bit position, and the bit value of each region those references delimit.
# Bit positions count from the least-significant page: 0 = LSB.
MODE_BIT_REFS: dict[str, tuple[tuple[int, ...], ...]] = {
    "slc": ((0,),),
    "mlc": ((1,), (0, 2)),
    "tlc": ((3,), (1, 5), (0, 2, 4, 6)),
}
MODE_BIT_REGIONS: dict[str, tuple[tuple[int, ...], ...]] = {
    "slc": ((1, 0),),
    "mlc": ((1, 0), (1, 0, 1)),
    "tlc": ((1, 0), (1, 0, 1), (1, 0, 1, 0, 1)),
}


def to_fixed(volts):
    """Quantize normalized volts to integer 1/64 units."""
    arr = np.rint(np.asarray(volts) * FP_SCALE).astype(np.int32)
    return arr if arr.ndim else int(arr)


def from_fixed(units):
    arr = np.asarray(units, dtype=np.float64) / FP_SCALE
    return arr if arr.ndim else float(arr)


def quantize(volts):
    arr = np.rint(np.asarray(volts) * FP_SCALE) / FP_SCALE
    return arr if arr.ndim else float(arr)


@dataclass(frozen=True)
class VoltageState:
    """One nominal cell state, identified by its ordinal in mean-voltage order."""

    ordinal: int
    mode: str = "tlc"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0 <= self.ordinal < len(MODE_BITS[self.mode]):
            raise ValueError(f"ordinal {self.ordinal} out of range for {self.mode}")

    @property
    def name(self) -> str:
        return "ER" if self.ordinal == 0 else f"P{self.ordinal}"

    @property
    def bits(self) -> tuple[int, ...]:
        return MODE_BITS[self.mode][self.ordinal]


@dataclass(frozen=True)
class StateStats:
    mean: float
    sigma: float

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not VOLT_MIN <= self.mean <= VOLT_MAX:
            raise ValueError(f"mean {self.mean} outside [{VOLT_MIN}, {VOLT_MAX}]")


class CalibrationTables:
    """Per-axis calibrated rows with interpolating lookup.

    Wear and disturb interpolate linearly in the key; retention interpolates
    linearly in log-seconds (its keys are exponentially spaced). Keys beyond
    the last row clamp to the last row; keys below the first row are errors.
    """

    def __init__(self, rows: dict[str, list[TableRow]] | None = None) -> None:
        rows = rows if rows is not None else default_rows()
        for axis in AXES:
            if axis not in rows or not rows[axis]:
                raise ValueError(f"missing rows for axis {axis!r}")
        self._rows = {axis: sorted(rows[axis], key=lambda r: r.key) for axis in AXES}
        base_pec = self.row_at(AXIS_PEC, BASELINE_PEC)
        base_ret = self._rows[AXIS_RETENTION][0]
        if base_ret.key != BASELINE_RETENTION_S or any(
            abs(a - b) > 1e-9 for a, b in zip(base_pec.means, base_ret.means)
        ):
            raise ValueError(
                "first retention row must replicate the shared wear baseline means")
        self._keys = {
            axis: np.array([r.key for r in self._rows[axis]]) for axis in AXES}
        self._means = {
            axis: np.array([r.means for r in self._rows[axis]]) for axis in AXES}
        self._sigmas = {
            axis: np.array([r.sigmas for r in self._rows[axis]]) for axis in AXES}

    def rows(self, axis: str) -> list[TableRow]:
        return list(self._rows[axis])

    def keys(self, axis: str) -> np.ndarray:
        return self._keys[axis].copy()

    def row_at(self, axis: str, key: float) -> TableRow:
        for row in self._rows[axis]:
            if row.key == key:
                return row
        raise KeyError(f"no tabulated {axis} row at {key:g}")

    @staticmethod
    def _axis_scale(axis: str, key) -> np.ndarray | float:
        if axis == AXIS_RETENTION:
            return np.log(key)
        return key

    def axis_arrays(self, axis: str, key: float) -> tuple[np.ndarray, np.ndarray]:
        """Interpolated (means[8], sigmas[8]) at key. Vector core of lookup_stats."""
        if axis not in AXES:
            raise KeyError(f"unknown axis {axis!r}")
        keys = self._keys[axis]
        if key < keys[0]:
            raise ValueError(
                f"{axis} key {key:g} below first tabulated row {keys[0]:g}")
        if key >= keys[-1]:
            return self._means[axis][-1].copy(), self._sigmas[axis][-1].copy()
        hi = int(np.searchsorted(keys, key, side="right"))
        lo = hi - 1
        x = self._axis_scale(axis, key)
        x0 = self._axis_scale(axis, keys[lo])
        x1 = self._axis_scale(axis, keys[hi])
        w = (x - x0) / (x1 - x0)
        means = (1.0 - w) * self._means[axis][lo] + w * self._means[axis][hi]
        sigmas = (1.0 - w) * self._sigmas[axis][lo] + w * self._sigmas[axis][hi]
        return means, sigmas


def lookup_stats(tables: CalibrationTables, state: int | str, axis: str,
                 key: float) -> StateStats:
    """Interpolated calibrated stats for one state along one measurement axis."""
    idx = state_index(state)
    means, sigmas = tables.axis_arrays(axis, key)
    return StateStats(float(means[idx]), float(sigmas[idx]))


@dataclass(frozen=True)
class Condition:
    """One (wear, age, disturb) operating point."""

    pec: float
    retention_seconds: float = BASELINE_RETENTION_S
    read_count: float = BASELINE_READS

    def __post_init__(self) -> None:
        if self.pec < 0 or self.retention_seconds < 0 or self.read_count < 0:
            raise ValueError("condition components must be ≥ 0")


BIRTH_CONDITION = Condition(0.0)


@dataclass(frozen=True)
class ThresholdModel:
    """Calibrated tables plus the additive drift-composition policy."""

    tables: CalibrationTables = field(default_factory=CalibrationTables)
    mode: str = "tlc"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def n_states(self) -> int:
        return len(MODE_TABLE_ROWS[self.mode])

    def table_rows(self) -> tuple[int, ...]:
        return MODE_TABLE_ROWS[self.mode]

    def composed_arrays(self, condition: Condition) -> tuple[np.ndarray, np.ndarray]:
        """Composed (means, sigmas) for this mode's states at a condition.

        Mean deltas add; variance deltas add relative to each drift table's
        own first row (the shared 2,000-cycle, 1-day, 1-read baseline).
        Ages under a day and read counts under one are fresh: their deltas
        are identically zero, matching the program-time distribution.
        """
        mu_p, sg_p = self.tables.axis_arrays(AXIS_PEC, condition.pec)
        mu = mu_p.copy()
        var = sg_p**2
        if condition.retention_seconds > BASELINE_RETENTION_S:
            mu_r, sg_r = self.tables.axis_arrays(
                AXIS_RETENTION, condition.retention_seconds)
            mu_r0, sg_r0 = self.tables.axis_arrays(
                AXIS_RETENTION, BASELINE_RETENTION_S)
            mu += mu_r - mu_r0
            var += sg_r**2 - sg_r0**2
        if condition.read_count > BASELINE_READS:
            mu_d, sg_d = self.tables.axis_arrays(AXIS_DISTURB, condition.read_count)
            mu_d0, sg_d0 = self.tables.axis_arrays(AXIS_DISTURB, BASELINE_READS)
            mu += mu_d - mu_d0
            var += sg_d**2 - sg_d0**2
        sigma = np.sqrt(np.maximum(_VAR_EPS, var))
        sigma = np.maximum(sigma, _SIGMA_FLOOR_FRAC * sg_p)
        rows = list(self.table_rows())
        return mu[rows], sigma[rows]

    def drift_deltas(self, condition: Condition) -> tuple[np.ndarray, ...]:
        """(mean delta, variance delta) per mode state for the retention and
        disturb components separately; the array realizes these per cell."""
        rows = list(self.table_rows())
        zeros = np.zeros(len(rows))
        dmu_r, dvar_r = zeros, zeros.copy()
        dmu_d, dvar_d = zeros.copy(), zeros.copy()
        if condition.retention_seconds > BASELINE_RETENTION_S:
            mu_r, sg_r = self.tables.axis_arrays(
                AXIS_RETENTION, condition.retention_seconds)
            mu_r0, sg_r0 = self.tables.axis_arrays(
                AXIS_RETENTION, BASELINE_RETENTION_S)
            dmu_r = (mu_r - mu_r0)[rows]
            dvar_r = (sg_r**2 - sg_r0**2)[rows]
        if condition.read_count > BASELINE_READS:
            mu_d, sg_d = self.tables.axis_arrays(AXIS_DISTURB, condition.read_count)
            mu_d0, sg_d0 = self.tables.axis_arrays(AXIS_DISTURB, BASELINE_READS)
            dmu_d = (mu_d - mu_d0)[rows]
            dvar_d = (sg_d**2 - sg_d0**2)[rows]
        return dmu_r, dvar_r, dmu_d, dvar_d


def composed_stats(model: ThresholdModel, state: int | str, pec: float,
                   retention_seconds: float, read_count: float) -> StateStats:
    """Distribution of one mode state at an arbitrary operating point."""
    if isinstance(state, str):
        row = state_index(state)
        try:
            idx = model.table_rows().index(row)
        except ValueError:
            raise KeyError(f"state {state!r} not in mode {model.mode!r}") from None
    else:
        idx = state
        if not 0 <= idx < model.n_states:
            raise KeyError(f"state ordinal {state} out of range for {model.mode!r}")
    mu, sigma = model.composed_arrays(Condition(pec, retention_seconds, read_count))
    return StateStats(float(mu[idx]), float(sigma[idx]))


def sample_voltage(stats: StateStats, rng: np.random.Generator,
                   size: int | None = None):
    """Gaussian sample(s), quantized to the fixed-point voltage grid."""
    return quantize(rng.normal(stats.mean, stats.sigma, size))


@dataclass(frozen=True)
class ReadRefSet:
    """Strictly increasing reference voltages: 1 (SLC), 3 (MLC) or 7 (TLC)."""

    refs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.refs) not in (1, 3, 7):
            raise ValueError("need 1, 3 or 7 references")
        if any(b <= a for a, b in zip(self.refs, self.refs[1:])):
            raise ValueError("references must be strictly increasing")

    def __len__(self) -> int:
        return len(self.refs)

    def __iter__(self) -> Iterator[float]:
        return iter(self.refs)

    def __getitem__(self, i: int) -> float:
        return self.refs[i]

    @property
    def mode(self) -> str:
        return {1: "slc", 3: "mlc", 7: "tlc"}[len(self.refs)]

    def for_bit(self, bit: int) -> tuple[float, ...]:
        """References needed to resolve one bit position (0 = LSB page)."""
        return tuple(self.refs[i] for i in MODE_BIT_REFS[self.mode][bit])

    def shifted(self, offsets: Sequence[float]) -> "ReadRefSet":
        if len(offsets) != len(self.refs):
            raise ValueError("one offset per reference")
        return ReadRefSet(tuple(
            quantize(r + o) for r, o in zip(self.refs, offsets)))


def gaussian_intersection(m0: float, s0: float, m1: float, s1: float) -> float:
    """Equal-density abscissa of two Gaussians, between their means.

    Falls back to the midpoint when the quadratic degenerates or no root
    lands inside the open interval.
    """
    if m0 > m1:
        m0, s0, m1, s1 = m1, s1, m0, s0
    mid = 0.5 * (m0 + m1)
    if abs(s0 - s1) < 1e-12:
        return mid
    a = 1.0 / s0**2 - 1.0 / s1**2
    b = -2.0 * (m0 / s0**2 - m1 / s1**2)
    c = m0**2 / s0**2 - m1**2 / s1**2 + 2.0 * math.log(s0 / s1)
    disc = b * b - 4.0 * a * c
    if disc < 0:
        return mid
    sq = math.sqrt(disc)
    roots = ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a))
    inside = [r for r in roots if m0 < r < m1]
    return inside[0] if inside else mid


def optimal_read_refs(model: ThresholdModel, condition: Condition) -> ReadRefSet:
    """References at the pairwise PDF intersections of the composed states."""
    mu, sg = model.composed_arrays(condition)
    refs = [
        gaussian_intersection(mu[i], sg[i], mu[i + 1], sg[i + 1])
        for i in range(len(mu) - 1)
    ]
    return ReadRefSet(tuple(quantize(r) for r in refs))


def birth_refs(model: ThresholdModel) -> ReadRefSet:
    """Device-birth references: intersections of the unworn calibration row."""
    return optimal_read_refs(model, BIRTH_CONDITION)


def encode_bits(bits: Sequence[int], mode: str) -> VoltageState:
    """State whose label matches the given bits (most-significant page first)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    key = tuple(int(b) for b in bits)
    if len(key) != BITS_PER_CELL[mode] or any(b not in (0, 1) for b in key):
        raise ValueError(f"need {BITS_PER_CELL[mode]} bits of 0/1 for {mode}")
    try:
        ordinal = MODE_BITS[mode].index(key)
    except ValueError:
        raise ValueError(f"no {mode} state labeled {key}") from None
    return VoltageState(ordinal, mode)


def decode_bits(voltage: float, refs: ReadRefSet | Sequence[float],
                mode: str) -> tuple[int, ...]:
    """Bin a voltage against the full reference set and return the state bits."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    ref_list = list(refs)
    if len(ref_list) != len(MODE_BITS[mode]) - 1:
        raise ValueError(f"{mode} needs {len(MODE_BITS[mode]) - 1} references")
    ordinal = int(np.searchsorted(np.asarray(ref_list), voltage, side="right"))
    return MODE_BITS[mode][ordinal]
