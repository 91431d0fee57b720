"""Flash array simulation: geometry, per-cell voltage state, and the
program/read/erase mechanics.

Programming samples final voltages from the calibrated distributions (the
pulse loop itself is abstracted away). Aging is realized lazily: each cell
carries latent proneness multipliers and per-cycle noise draws, and its
effective voltage is recomputed at read time from the stored program-time
voltage plus the composed drift deltas. For additive drift this is
bit-identical to mutating every cell on every clock tick, at O(read) cost.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ._rng import substream
from .voltage_model import (
    BITS_PER_CELL,
    FP_SCALE,
    MODE_BIT_REGIONS,
    MODE_BITS,
    MODES,
    VOLT_MAX,
    VOLT_MIN,
    CalibrationTables,
    Condition,
    ReadRefSet,
    StateStats,
    ThresholdModel,
    gaussian_intersection,
)

SCHEMES = ("one_shot", "two_step", "foggy_fine")

# Pulse passes per wordline. Multi-pass schemes consume one page per pass,
# in bit-position order (LSB first); one_shot takes every page at once.
SCHEME_PASSES = {"one_shot": 1, "two_step": 2, "foggy_fine": 3}
SCHEME_MODES = {"one_shot": MODES, "two_step": ("mlc",), "foggy_fine": ("tlc",)}

# Cells mid-scheme (temporary or coarse placements) until the final pass.
INTERMEDIATE = -2

# A downgraded triple-bit block stores two bits per cell on these rungs of
# its physical ladder; the wide erased-to-first gap is where worn blocks
# lose most of their margin.
DOWNGRADE_STATES = (0, 3, 5, 7)
_DOWNGRADE_IDX = np.array(DOWNGRADE_STATES, dtype=np.intp)

# Latent per-cell susceptibility spread; mean-one lognormal so population
# mean shifts stay exactly at the calibrated deltas.
PRONENESS_SIGMA = 0.35
PRONENESS_VAR = math.exp(PRONENESS_SIGMA**2) - 1.0

# Program-time sampling is clipped at ±3.2 sigma: with the calibrated sigmas
# this leaves adjacent fresh distributions disjoint, so a just-programmed
# page reads back clean, as measured devices do.
PROGRAM_CLIP_SIGMAS = 3.2

_SNAPSHOT_VERSION = 2


def _bit_lut(mode: str) -> np.ndarray:
    """[state, bit_position] -> bit value, positions counted LSB page first."""
    bits = MODE_BITS[mode]
    width = BITS_PER_CELL[mode]
    return np.array(
        [[s[width - 1 - b] for b in range(width)] for s in bits], dtype=np.uint8)


def _sig_lut(mode: str) -> np.ndarray:
    """Inverse of _bit_lut: packed page bits (LSB page = bit 0) -> state."""
    lut = _bit_lut(mode)
    out = np.zeros(1 << lut.shape[1], dtype=np.int8)
    for state, row in enumerate(lut):
        sig = sum(int(v) << b for b, v in enumerate(row))
        out[sig] = state
    return out


_BIT_LUT = {m: _bit_lut(m) for m in MODES}
_SIG_LUT = {m: _sig_lut(m) for m in MODES}
_REGION_LUT = {
    m: tuple(np.array(r, dtype=np.uint8) for r in MODE_BIT_REGIONS[m])
    for m in MODES
}


class OrderingError(RuntimeError):
    """A program request that violates the wordline pass sequencing rules."""


def states_from_bits(mode: str, pages: np.ndarray) -> np.ndarray:
    """Cell states from stacked page bits [bit position, cell], LSB page first."""
    pages = np.asarray(pages, dtype=np.uint8)
    if pages.ndim != 2 or pages.shape[0] != BITS_PER_CELL[mode]:
        raise ValueError(f"need {BITS_PER_CELL[mode]} pages stacked")
    sig = np.zeros(pages.shape[1], dtype=np.intp)
    for bit in range(pages.shape[0]):
        sig |= pages[bit].astype(np.intp) << bit
    return _SIG_LUT[mode][sig].copy()


def bits_from_states(mode: str, states: np.ndarray, bit: int) -> np.ndarray:
    """One page's bits for the given cell states."""
    return _BIT_LUT[mode][np.asarray(states, dtype=np.intp), bit]


def downgraded_read_refs(model: ThresholdModel,
                         condition: Condition) -> ReadRefSet:
    """Read references for a downgraded block: the boundaries between the
    four retained rungs of the triple-bit ladder."""
    if model.mode != "tlc":
        raise ValueError("downgraded blocks live on a tlc ladder")
    mu, sg = model.composed_arrays(condition)
    return ReadRefSet(tuple(
        gaussian_intersection(float(mu[a]), float(sg[a]),
                              float(mu[b]), float(sg[b]))
        for a, b in zip(DOWNGRADE_STATES, DOWNGRADE_STATES[1:])))


@dataclass(frozen=True)
class Geometry:
    channels: int = 1
    chips_per_channel: int = 2
    dies_per_chip: int = 1
    planes_per_die: int = 1
    blocks_per_plane: int = 64
    wordlines_per_block: int = 64
    cells_per_wordline: int = 4096
    cell_mode: str = "tlc"

    def __post_init__(self) -> None:
        counts = (self.channels, self.chips_per_channel, self.dies_per_chip,
                  self.planes_per_die, self.blocks_per_plane,
                  self.wordlines_per_block, self.cells_per_wordline)
        if any(c < 1 for c in counts):
            raise ValueError("all geometry counts must be >= 1")
        if self.cell_mode not in MODES:
            raise ValueError(f"unknown cell mode {self.cell_mode!r}")

    @property
    def dies(self) -> int:
        return self.channels * self.chips_per_channel * self.dies_per_chip

    @property
    def planes(self) -> int:
        return self.dies * self.planes_per_die

    @property
    def total_blocks(self) -> int:
        return self.planes * self.blocks_per_plane

    @property
    def bits_per_cell(self) -> int:
        return BITS_PER_CELL[self.cell_mode]

    @property
    def pages_per_block(self) -> int:
        return self.wordlines_per_block * self.bits_per_cell

    def plane_of_block(self, block: int) -> int:
        if not 0 <= block < self.total_blocks:
            raise ValueError(f"block {block} out of range")
        return block // self.blocks_per_plane

    def block_id(self, plane: int, index: int) -> int:
        if not 0 <= plane < self.planes:
            raise ValueError(f"plane {plane} out of range")
        if not 0 <= index < self.blocks_per_plane:
            raise ValueError(f"block index {index} out of range")
        return plane * self.blocks_per_plane + index


@dataclass(frozen=True)
class InterferenceCoefficients:
    """Coupling ratios toward the three neighbor classes of a victim cell."""

    k_wordline: float = 0.110
    k_bitline: float = 0.055
    k_diagonal: float = 0.020

    def __post_init__(self) -> None:
        if not self.k_wordline > self.k_bitline > self.k_diagonal > 0:
            raise ValueError("need k_wordline > k_bitline > k_diagonal > 0")


# Measured per technology node; the denser node couples far more strongly.
NODE_COEFFICIENTS = {
    "1x": InterferenceCoefficients(0.110, 0.055, 0.020),
    "2y": InterferenceCoefficients(0.060, 0.032, 0.012),
}


@dataclass(frozen=True)
class ProgramParams:
    """Pulse-abstraction knobs shared by every block of an array."""

    v_pass: float = 600.0
    fine_sigma_factor: float = 1.0
    foggy_sigma_factor: float = 2.0
    buffer_read_error_rate: float = 0.0
    p_program_fail: float = 0.0
    p_erase_fail: float = 0.0
    partial_disturb_multiplier: float = 2.0
    pass_through_severity: float = 1.0

    def __post_init__(self) -> None:
        for name in ("buffer_read_error_rate", "p_program_fail", "p_erase_fail",
                     "pass_through_severity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.fine_sigma_factor <= 0 or self.foggy_sigma_factor <= 0:
            raise ValueError("sigma factors must be > 0")
        if self.partial_disturb_multiplier < 1.0:
            raise ValueError("partial_disturb_multiplier must be >= 1")


@dataclass(frozen=True)
class Mechanisms:
    """Error-source switches; every mechanism defaults on."""

    retention: bool = True
    read_disturb: bool = True
    interference: bool = True
    program_errors: bool = True
    pass_through: bool = True


@dataclass(frozen=True)
class InterferenceEvent:
    block: int
    aggressor_wl: int
    pass_index: int
    victim_wl: int
    victim_was_full: bool
    cells_shifted: int
    mean_shift: float
    max_shift: float


@dataclass(frozen=True)
class BlockState:
    """Public per-block snapshot."""

    pec: int
    reads: int
    scheme: str | None
    downgraded: bool
    bad: bool
    v_pass: float
    closed: bool
    pass_count: np.ndarray
    page_valid: np.ndarray
    page_time: np.ndarray


class _Block:
    __slots__ = (
        "stored", "z_ret", "z_dis", "mult_ret", "mult_dis", "state",
        "pass_count", "prog_time", "prog_pec", "disturb", "page_valid",
        "page_time", "pec", "reads", "scheme", "downgraded", "bad", "v_pass",
        "buffer", "gen",
    )

    def __init__(self, wordlines: int, cells: int, pages: int, v_pass: float,
                 gen: np.random.Generator) -> None:
        shape = (wordlines, cells)
        self.stored = np.zeros(shape, dtype=np.float32)
        self.z_ret = np.zeros(shape, dtype=np.float32)
        self.z_dis = np.zeros(shape, dtype=np.float32)
        ln_mu = -0.5 * PRONENESS_SIGMA**2
        self.mult_ret = np.exp(
            gen.normal(ln_mu, PRONENESS_SIGMA, shape)).astype(np.float32)
        self.mult_dis = np.exp(
            gen.normal(ln_mu, PRONENESS_SIGMA, shape)).astype(np.float32)
        self.state = np.zeros(shape, dtype=np.int8)
        self.pass_count = np.zeros(wordlines, dtype=np.int8)
        self.prog_time = np.zeros(wordlines, dtype=np.float64)
        self.prog_pec = np.zeros(wordlines, dtype=np.int32)
        self.disturb = np.zeros(wordlines, dtype=np.float64)
        self.page_valid = np.zeros(pages, dtype=np.uint8)
        self.page_time = np.zeros(pages, dtype=np.float64)
        self.pec = 0
        self.reads = 0
        self.scheme: str | None = None
        self.downgraded = False
        self.bad = False
        self.v_pass = v_pass
        self.buffer: dict[int, dict[int, np.ndarray]] = {}
        self.gen = gen


class CellArray:
    """All cell and block state of one simulated device.

    Owned by a single simulation instance; per-block numpy state is
    allocated on first touch so sparse experiments stay cheap.
    """

    def __init__(self, geometry: Geometry, seed: int,
                 tables: CalibrationTables | None = None,
                 coefficients: InterferenceCoefficients | None = None,
                 params: ProgramParams | None = None,
                 mechanisms: Mechanisms | None = None,
                 log_interference: bool = False) -> None:
        self.geometry = geometry
        self.tables = tables if tables is not None else CalibrationTables()
        self.coefficients = (
            coefficients if coefficients is not None else NODE_COEFFICIENTS["1x"])
        self.params = params if params is not None else ProgramParams()
        self.mechanisms = mechanisms if mechanisms is not None else Mechanisms()
        self.log_interference = log_interference
        self.interference_log: list[InterferenceEvent] = []
        self._seed = seed
        self._models = {m: ThresholdModel(self.tables, m) for m in MODES}
        self._blocks: dict[int, _Block] = {}
        self._now = 0.0
        self._delta_cache: dict[tuple, tuple[np.ndarray, ...]] = {}

    # ------------------------------------------------------------- plumbing

    @property
    def now(self) -> float:
        return self._now

    def threshold_model(self, mode: str) -> ThresholdModel:
        return self._models[mode]

    def block_mode(self, block: int) -> str:
        b = self._block(block)
        return "mlc" if b.downgraded else self.geometry.cell_mode

    def block_bits(self, block: int) -> int:
        return BITS_PER_CELL[self.block_mode(block)]

    def pages_per_block(self, block: int) -> int:
        return self.geometry.wordlines_per_block * self.block_bits(block)

    def page_address(self, block: int, page: int) -> tuple[int, int]:
        """(wordline, bit position) of a page index."""
        bits = self.block_bits(block)
        if not 0 <= page < self.pages_per_block(block):
            raise ValueError(f"page {page} out of range")
        return page // bits, page % bits

    def _block(self, block: int) -> _Block:
        if not 0 <= block < self.geometry.total_blocks:
            raise ValueError(f"block {block} out of range")
        b = self._blocks.get(block)
        if b is None:
            g = self.geometry
            b = _Block(
                g.wordlines_per_block, g.cells_per_wordline,
                g.wordlines_per_block * g.bits_per_cell, self.params.v_pass,
                substream(self._seed, "array", "block", block))
            prone = substream(self._seed, "array", "prone", block)
            ln_mu = -0.5 * PRONENESS_SIGMA**2
            shape = b.mult_ret.shape
            b.mult_ret = np.exp(
                prone.normal(ln_mu, PRONENESS_SIGMA, shape)).astype(np.float32)
            b.mult_dis = np.exp(
                prone.normal(ln_mu, PRONENESS_SIGMA, shape)).astype(np.float32)
            # A never-cycled block still holds the factory erase.
            self._sample_erased(b)
            self._blocks[block] = b
        return b

    def block_state(self, block: int) -> BlockState:
        b = self._block(block)
        passes = SCHEME_PASSES.get(b.scheme or "", 0)
        closed = b.scheme is not None and bool(np.all(b.pass_count == passes))
        return BlockState(
            pec=b.pec, reads=b.reads, scheme=b.scheme, downgraded=b.downgraded,
            bad=b.bad, v_pass=b.v_pass, closed=closed,
            pass_count=b.pass_count.copy(), page_valid=b.page_valid.copy(),
            page_time=b.page_time.copy())

    def set_page_valid(self, block: int, page: int, valid: bool) -> None:
        self.page_address(block, page)
        self._block(block).page_valid[page] = 1 if valid else 0

    def mark_bad(self, block: int) -> None:
        self._block(block).bad = True

    def is_bad(self, block: int) -> bool:
        return self._block(block).bad

    def set_v_pass(self, block: int, v_pass: float) -> None:
        self._block(block).v_pass = float(v_pass)

    def wear_to(self, block: int, pec: int) -> None:
        """Set the erase counter directly (accelerated wear for experiments);
        the next erase starts cycle pec + 1."""
        if pec < 0:
            raise ValueError("pec must be >= 0")
        self._block(block).pec = int(pec)

    def set_downgraded(self, block: int, downgraded: bool) -> None:
        """Toggle reduced-state (two bits per cell) operation. The block must
        hold no programmed data; page bookkeeping is resized for the mode."""
        if self.geometry.cell_mode != "tlc":
            raise ValueError("only tlc arrays support downgrading")
        b = self._block(block)
        if np.any(b.pass_count > 0):
            raise OrderingError("cannot change mode of a programmed block")
        b.downgraded = bool(downgraded)
        pages = self.pages_per_block(block)
        b.page_valid = np.zeros(pages, dtype=np.uint8)
        b.page_time = np.zeros(pages, dtype=np.float64)

    # ------------------------------------------------------------ model math

    def _drift_deltas(self, mode: str, pec: int, age_s: float,
                      reads: float) -> tuple[np.ndarray, ...]:
        key = (mode, pec, age_s, reads)
        hit = self._delta_cache.get(key)
        if hit is not None:
            return hit
        cond = Condition(float(pec), max(0.0, age_s), max(0.0, reads))
        dmu_r, dvar_r, dmu_d, dvar_d = self._models[mode].drift_deltas(cond)
        if len(self._delta_cache) > 8192:
            self._delta_cache.clear()
        out = (dmu_r, dvar_r, dmu_d, dvar_d)
        self._delta_cache[key] = out
        return out

    def _composed(self, mode: str, pec: int) -> tuple[np.ndarray, np.ndarray]:
        return self._models[mode].composed_arrays(Condition(float(pec)))

    def _block_stats(self, b: _Block, pec: int) -> tuple[np.ndarray, np.ndarray]:
        """Composed stats indexed by the block's logical states; a downgraded
        block keeps its physical ladder but uses only four rungs of it."""
        if b.downgraded:
            mu, sg = self._composed("tlc", pec)
            return mu[_DOWNGRADE_IDX], sg[_DOWNGRADE_IDX]
        return self._composed(self.geometry.cell_mode, pec)

    def _sample_clipped(self, gen: np.random.Generator, mean, sigma,
                        size) -> np.ndarray:
        z = np.clip(gen.standard_normal(size), -PROGRAM_CLIP_SIGMAS,
                    PROGRAM_CLIP_SIGMAS)
        return np.asarray(mean) + np.asarray(sigma) * z

    def wl_condition(self, block: int, wl: int) -> Condition:
        b = self._block(block)
        age = max(0.0, self._now - float(b.prog_time[wl]))
        return Condition(float(b.prog_pec[wl]), age, float(b.disturb[wl]))

    def effective_voltages(self, block: int, wl: int) -> np.ndarray:
        """Current per-cell voltages of one wordline, on the fixed-point grid."""
        b = self._block(block)
        return self._effective(b, wl)

    def _effective(self, b: _Block, wl: int) -> np.ndarray:
        eff = b.stored[wl].astype(np.float64)
        mech = self.mechanisms
        age = max(0.0, self._now - float(b.prog_time[wl])) if mech.retention else 0.0
        reads = float(b.disturb[wl]) if mech.read_disturb else 0.0
        if age == 0.0 and reads <= 1.0:
            return eff
        table_mode = "tlc" if b.downgraded else self.geometry.cell_mode
        dmu_r, dvar_r, dmu_d, dvar_d = self._drift_deltas(
            table_mode, int(b.prog_pec[wl]), age, reads)
        # Heterogeneity spreads the mean shift across cells; any variance
        # budget left over becomes per-cycle noise. A shrinking calibrated
        # sigma cannot be realized additively, so the multiplier spread is
        # kept and the floor below absorbs the difference.
        w_r = np.sqrt(np.maximum(0.0, dvar_r - dmu_r**2 * PRONENESS_VAR))
        w_d = np.sqrt(np.maximum(0.0, dvar_d - dmu_d**2 * PRONENESS_VAR))
        idx = np.where(b.state[wl] < 0, 1, b.state[wl]).astype(np.intp)
        if b.downgraded:
            idx = _DOWNGRADE_IDX[idx]
        eff = eff + (b.mult_ret[wl] * dmu_r[idx] + b.z_ret[wl] * w_r[idx]
                     + b.mult_dis[wl] * dmu_d[idx] + b.z_dis[wl] * w_d[idx])
        return np.round(eff * FP_SCALE) / FP_SCALE

    # -------------------------------------------------------------- lifecycle

    def advance_time(self, dt_seconds: float) -> None:
        if dt_seconds < 0:
            raise ValueError("dt must be >= 0")
        self._now += float(dt_seconds)

    def record_disturb(self, block: int, n_reads: int) -> None:
        """Bulk pass-through exposure for every programmed wordline."""
        if n_reads < 0:
            raise ValueError("n_reads must be >= 0")
        b = self._block(block)
        passes = SCHEME_PASSES.get(b.scheme or "", 1)
        programmed = b.pass_count >= 1
        partial = programmed & (b.pass_count < passes)
        b.disturb[programmed] += float(n_reads)
        if self.params.partial_disturb_multiplier > 1.0:
            extra = self.params.partial_disturb_multiplier - 1.0
            b.disturb[partial] += extra * float(n_reads)

    def _sample_erased(self, b: _Block) -> None:
        mu, sg = self._block_stats(b, b.pec)
        shape = b.stored.shape
        sample = self._sample_clipped(b.gen, mu[0], sg[0], shape)
        # Erase verify pushes stragglers down: no erased cell sits above zero.
        sample = np.clip(sample, VOLT_MIN, 0.0)
        b.stored = (np.round(sample * FP_SCALE) / FP_SCALE).astype(np.float32)
        b.z_ret = b.gen.standard_normal(shape).astype(np.float32)
        b.z_dis = b.gen.standard_normal(shape).astype(np.float32)

    def erase_block(self, block: int) -> bool:
        """Reset every cell to a fresh erased distribution at the incremented
        cycle count. Returns False on an injected erase failure."""
        b = self._block(block)
        if b.bad:
            raise ValueError(f"block {block} is marked bad")
        if self.params.p_erase_fail > 0.0 and (
                b.gen.random() < self.params.p_erase_fail):
            return False
        b.pec += 1
        self._sample_erased(b)
        b.state[:] = 0
        b.pass_count[:] = 0
        b.prog_time[:] = self._now
        b.prog_pec[:] = b.pec
        b.disturb[:] = 0.0
        b.reads = 0
        b.scheme = None
        b.buffer.clear()
        b.page_valid[:] = 0
        b.page_time[:] = 0.0
        return True

    # ------------------------------------------------------------- programming

    def program_wordline(self, block: int, wl: int, data,
                         scheme: str | None = None) -> bool:
        """Run the next pulse pass of one wordline.

        Multi-pass schemes take the pass's single page (LSB first) as a bit
        array; one_shot takes all pages stacked [bit position, cell].
        Returns False on an injected program failure.
        """
        b = self._block(block)
        mode = "mlc" if b.downgraded else self.geometry.cell_mode
        if b.bad:
            raise ValueError(f"block {block} is marked bad")
        if scheme is None:
            scheme = b.scheme or ("one_shot" if mode == "slc" else
                                  {"mlc": "two_step", "tlc": "foggy_fine"}[mode])
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        if mode not in SCHEME_MODES[scheme]:
            raise ValueError(f"scheme {scheme!r} does not apply to {mode}")
        if b.scheme is not None and b.scheme != scheme:
            raise OrderingError(
                f"block {block} already programming with {b.scheme!r}")
        if not 0 <= wl < self.geometry.wordlines_per_block:
            raise ValueError(f"wordline {wl} out of range")
        passes = SCHEME_PASSES[scheme]
        p = int(b.pass_count[wl])
        if p >= passes:
            raise OrderingError(f"wordline {wl} already fully programmed")
        if wl > 0 and b.pass_count[wl - 1] < p + 1:
            raise OrderingError(
                f"wordline {wl} pass {p + 1} before wordline {wl - 1} "
                f"reached it")
        bits = BITS_PER_CELL[mode]
        cells = self.geometry.cells_per_wordline
        data = np.asarray(data, dtype=np.uint8)
        want = (bits, cells) if scheme == "one_shot" else (cells,)
        if data.shape != want:
            raise ValueError(f"data shape {data.shape} != {want}")
        if data.max(initial=0) > 1:
            raise ValueError("data bits must be 0/1")
        b.scheme = scheme

        if scheme == "one_shot":
            self._pass_one_shot(b, block, wl, data, mode)
        elif scheme == "two_step":
            if p == 0:
                self._pass_two_step_low(b, block, wl, data, mode)
            else:
                self._pass_two_step_high(b, block, wl, data, mode)
        else:
            if p == 0:
                self._pass_binary(b, block, wl, data, mode)
            elif p == 1:
                self._pass_foggy(b, block, wl, data, mode)
            else:
                self._pass_fine(b, block, wl, data, mode)

        pages_written = range(bits) if scheme == "one_shot" else (p,)
        for bit in pages_written:
            b.page_time[wl * bits + bit] = self._now
        if self.params.p_program_fail > 0.0 and (
                b.gen.random() < self.params.p_program_fail):
            return False
        return True

    def reprogram_in_place(self, block: int, wl: int, target_states,
                           window_sigmas: float = 2.0,
                           sigma_factor: float = 1.0) -> int:
        """Incremental-pulse rewrite of a fully programmed wordline.

        Cells sitting below their target state's verify window (mean minus
        ``window_sigmas`` sigmas) are raised back into it with a fresh
        sample; pulses only ever raise, so a cell that drifted upward out
        of a lower state cannot be repaired here. The caller's corrected
        states become the wordline's state record, the aging clocks
        restart, and drift on unpulsed cells is baked in. Returns the
        number of cells pulsed.
        """
        b = self._block(block)
        if b.bad:
            raise ValueError(f"block {block} is marked bad")
        mode = self.block_mode(block)
        passes = SCHEME_PASSES.get(b.scheme or "", 0)
        if b.scheme is None or int(b.pass_count[wl]) != passes:
            raise OrderingError(
                "in-place reprogram needs a fully programmed wordline")
        states = np.asarray(target_states, dtype=np.int16)
        if states.shape != (self.geometry.cells_per_wordline,):
            raise ValueError("target states shape mismatch")
        n_states = 1 << BITS_PER_CELL[mode]
        if states.min() < 0 or states.max() >= n_states:
            raise ValueError("target state out of range")

        mu, sg = self._block_stats(b, int(b.pec))
        eff = self._effective(b, wl)
        idx = states.astype(np.intp)
        low = (states > 0) & (eff < mu[idx] - window_sigmas * sg[idx])
        fresh = self._sample_clipped(
            b.gen, mu[idx], sg[idx] * sigma_factor, states.shape)
        new = np.clip(np.where(low, np.maximum(eff, fresh), eff),
                      VOLT_MIN, VOLT_MAX)
        state_before = b.state[wl].copy()
        b.stored[wl] = (np.round(new * FP_SCALE) / FP_SCALE).astype(np.float32)
        b.state[wl] = states
        b.z_ret[wl] = b.gen.standard_normal(new.shape).astype(np.float32)
        b.z_dis[wl] = b.gen.standard_normal(new.shape).astype(np.float32)
        b.prog_time[wl] = self._now
        b.prog_pec[wl] = b.pec
        b.disturb[wl] = 0.0
        bits = BITS_PER_CELL[mode]
        b.page_time[wl * bits:(wl + 1) * bits] = self._now
        delta = np.where(low, np.maximum(0.0, new - eff), 0.0)
        self._couple_neighbors(b, block, wl, passes, delta, low, state_before)
        return int(np.count_nonzero(low))

    def _buffer_read(self, b: _Block, wl: int, bit: int) -> np.ndarray:
        """Staging-buffer read-back; a tiny flip rate models buffer wear."""
        data = b.buffer[wl][bit]
        rate = self.params.buffer_read_error_rate
        if rate > 0.0 and self.mechanisms.program_errors:
            flips = b.gen.random(data.shape) < rate
            return data ^ flips.astype(np.uint8)
        return data.copy()

    def _apply_pass(self, b: _Block, block: int, wl: int,
                    pulsed: np.ndarray, targets: np.ndarray,
                    new_state: np.ndarray) -> None:
        """Commit one pulse pass: bake drift on untouched cells, move pulsed
        cells, restart the wordline's aging clocks, couple to neighbors."""
        eff = self._effective(b, wl)
        state_before = b.state[wl].copy()
        new = np.clip(np.where(pulsed, targets, eff), VOLT_MIN, VOLT_MAX)
        b.stored[wl] = (np.round(new * FP_SCALE) / FP_SCALE).astype(np.float32)
        b.state[wl] = new_state
        b.z_ret[wl] = b.gen.standard_normal(new.shape).astype(np.float32)
        b.z_dis[wl] = b.gen.standard_normal(new.shape).astype(np.float32)
        b.prog_time[wl] = self._now
        b.prog_pec[wl] = b.pec
        b.disturb[wl] = 0.0
        pass_index = int(b.pass_count[wl])
        b.pass_count[wl] += 1
        delta = np.where(pulsed, np.maximum(0.0, new - eff), 0.0)
        self._couple_neighbors(b, block, wl, pass_index, delta, pulsed,
                               state_before)

    def _couple_neighbors(self, b: _Block, block: int, wl: int,
                          pass_index: int, delta: np.ndarray,
                          pulsed: np.ndarray, state_before: np.ndarray) -> None:
        """Coupling lands only on victim cells already programmed; erased
        cells are untouched (their drift is owned by the calibrated tables)
        and cells pulsed in this very pass are verify-compensated."""
        if not self.mechanisms.interference or not np.any(delta > 0.0):
            return
        k = self.coefficients
        lateral = np.zeros_like(delta)
        lateral[:-1] += delta[1:]
        lateral[1:] += delta[:-1]
        passes = SCHEME_PASSES[b.scheme or "one_shot"]

        def log(victim_wl: int, was_full: bool, shift: np.ndarray) -> None:
            if not self.log_interference:
                return
            moved = shift > 0.0
            self.interference_log.append(InterferenceEvent(
                block=block, aggressor_wl=wl, pass_index=pass_index,
                victim_wl=victim_wl, victim_was_full=was_full,
                cells_shifted=int(np.count_nonzero(moved)),
                mean_shift=float(shift.mean()),
                max_shift=float(shift.max())))

        def add(victim_wl: int, shift: np.ndarray) -> None:
            row = b.stored[victim_wl] + shift
            b.stored[victim_wl] = (
                np.round(np.clip(row, VOLT_MIN, VOLT_MAX) * FP_SCALE)
                / FP_SCALE).astype(np.float32)

        same = k.k_bitline * lateral
        same[pulsed | (state_before == 0)] = 0.0
        if np.any(same > 0.0):
            add(wl, same)
            log(wl, False, same)
        for v in (wl - 1, wl + 1):
            if not 0 <= v < self.geometry.wordlines_per_block:
                continue
            if b.pass_count[v] < 1:
                continue
            was_full = int(b.pass_count[v]) == passes
            shift = k.k_wordline * delta + k.k_diagonal * lateral
            shift[b.state[v] == 0] = 0.0
            if not np.any(shift > 0.0):
                continue
            add(v, shift)
            log(v, was_full, shift)

    def _pass_one_shot(self, b: _Block, block: int, wl: int,
                       data: np.ndarray, mode: str) -> None:
        sig = np.zeros(data.shape[1], dtype=np.intp)
        for bit in range(data.shape[0]):
            sig |= data[bit].astype(np.intp) << bit
        states = _SIG_LUT[mode][sig]
        mu, sg = self._block_stats(b, b.pec)
        pulsed = states > 0
        targets = self._sample_clipped(
            b.gen, mu[states], sg[states], states.shape)
        self._apply_pass(b, block, wl, pulsed, targets, states)

    def _temp_stats(self, b: _Block, pec: int) -> StateStats:
        """Half-programmed placement: mean between the first two programmed
        states, spread of the first."""
        mu, sg = self._block_stats(b, pec)
        return StateStats(float(0.5 * (mu[1] + mu[2])), float(sg[1]))

    def _binary_stats(self, b: _Block, pec: int) -> StateStats:
        """Single-pass split point for the upper half of the window."""
        mu, sg = self._block_stats(b, pec)
        return StateStats(float(0.5 * (mu[3] + mu[4])), float(sg[3]))

    def _pass_two_step_low(self, b: _Block, block: int, wl: int,
                           lsb: np.ndarray, mode: str) -> None:
        tp = self._temp_stats(b, b.pec)
        pulsed = lsb == 0
        targets = self._sample_clipped(b.gen, tp.mean, tp.sigma, lsb.shape)
        state = np.where(pulsed, INTERMEDIATE, b.state[wl]).astype(np.int8)
        self._apply_pass(b, block, wl, pulsed, targets, state)

    def _internal_low_ref(self, b: _Block, pec: int) -> float:
        mu, sg = self._block_stats(b, pec)
        tp = self._temp_stats(b, pec)
        return gaussian_intersection(float(mu[0]), float(sg[0]),
                                     tp.mean, tp.sigma)

    def _pass_two_step_high(self, b: _Block, block: int, wl: int,
                            msb: np.ndarray, mode: str) -> None:
        # The high pass re-derives the low page from the cells themselves,
        # uncorrected; drifted or disturbed cells can be misbinned, sending
        # an erased cell to the third programmed state or a half-programmed
        # cell one state too high.
        if self.mechanisms.program_errors:
            eff = self._effective(b, wl)
            ref = self._internal_low_ref(b, int(b.prog_pec[wl]))
            read_low = (eff < ref).astype(np.uint8)
        else:
            read_low = (b.state[wl] != INTERMEDIATE).astype(np.uint8)
        final = _SIG_LUT[mode][
            read_low.astype(np.intp) | (msb.astype(np.intp) << 1)]
        mu, sg = self._block_stats(b, b.pec)
        pulsed = final > 0
        targets = self._sample_clipped(b.gen, mu[final], sg[final], final.shape)
        self._apply_pass(b, block, wl, pulsed, targets, final.astype(np.int8))

    def _pass_binary(self, b: _Block, block: int, wl: int,
                     lsb: np.ndarray, mode: str) -> None:
        bs = self._binary_stats(b, b.pec)
        pulsed = lsb == 0
        targets = self._sample_clipped(b.gen, bs.mean, bs.sigma, lsb.shape)
        state = np.where(pulsed, INTERMEDIATE, b.state[wl]).astype(np.int8)
        b.buffer.setdefault(wl, {})[0] = lsb.copy()
        self._apply_pass(b, block, wl, pulsed, targets, state)

    def _pass_foggy(self, b: _Block, block: int, wl: int,
                    csb: np.ndarray, mode: str) -> None:
        """Coarse placement of the four (low, middle) bit groups; the group
        holding erased cells is left untouched until the fine pass."""
        low = self._buffer_read(b, wl, 0)
        mu, sg = self._block_stats(b, b.pec)
        group = (csb.astype(np.intp) << 1) | low.astype(np.intp)
        pair_lo = {0b11: 0, 0b01: 2, 0b00: 4, 0b10: 6}
        mean = np.empty(4)
        sigma = np.empty(4)
        for g, lo in pair_lo.items():
            mean[g] = 0.5 * (mu[lo] + mu[lo + 1]) if lo else mu[0]
            sigma[g] = (max(sg[lo], sg[lo + 1]) * self.params.foggy_sigma_factor
                        if lo else sg[0])
        pulsed = group != 0b11
        targets = self._sample_clipped(
            b.gen, mean[group], sigma[group], group.shape)
        state = np.where(pulsed, INTERMEDIATE, b.state[wl]).astype(np.int8)
        b.buffer[wl][1] = csb.copy()
        self._apply_pass(b, block, wl, pulsed, targets, state)

    def _pass_fine(self, b: _Block, block: int, wl: int,
                   msb: np.ndarray, mode: str) -> None:
        low = self._buffer_read(b, wl, 0)
        mid = self._buffer_read(b, wl, 1)
        sig = (low.astype(np.intp) | (mid.astype(np.intp) << 1)
               | (msb.astype(np.intp) << 2))
        final = _SIG_LUT[mode][sig]
        mu, sg = self._block_stats(b, b.pec)
        pulsed = final > 0
        targets = self._sample_clipped(
            b.gen, mu[final], sg[final] * self.params.fine_sigma_factor,
            final.shape)
        del b.buffer[wl]
        self._apply_pass(b, block, wl, pulsed, targets, final.astype(np.int8))

    # ------------------------------------------------------------------ reads

    def _readable_bits(self, b: _Block, wl: int) -> int:
        scheme = b.scheme
        if scheme is None:
            return 0
        passes = SCHEME_PASSES[scheme]
        p = int(b.pass_count[wl])
        bits = BITS_PER_CELL["mlc" if b.downgraded else self.geometry.cell_mode]
        if scheme == "one_shot":
            return bits if p else 0
        return bits if p == passes else p

    def read_page(self, block: int, page: int, refs: ReadRefSet,
                  count_read: bool = True) -> np.ndarray:
        """Bin every cell of the page against the reference set.

        Side effects (suppressed with count_read=False for diagnostics):
        the block read counter advances and every other programmed wordline
        accrues one unit of pass-through exposure.
        """
        b = self._block(block)
        mode = "mlc" if b.downgraded else self.geometry.cell_mode
        if refs.mode != mode:
            raise ValueError(f"{refs.mode} references on a {mode} block")
        wl, bit = self.page_address(block, page)
        readable = self._readable_bits(b, wl)
        if 0 < readable <= bit:
            raise ValueError(
                f"page {page} not yet written (wordline pass state)")
        eff = self._effective(b, wl)
        lut = _REGION_LUT[mode][bit]
        if bit == 0 and readable == 1 and b.scheme in ("two_step", "foggy_fine"):
            # half-programmed low page: the split sits between the erased
            # and temporary placements, not at the final reference
            pec = int(b.prog_pec[wl])
            if b.scheme == "two_step":
                ref = self._internal_low_ref(b, pec)
            else:
                bs = self._binary_stats(b, pec)
                mu, sg = self._block_stats(b, pec)
                ref = gaussian_intersection(
                    float(mu[0]), float(sg[0]), bs.mean, bs.sigma)
            out = np.where(eff < ref, lut[0], lut[1]).astype(np.uint8)
        else:
            # an erased wordline decodes here too: every cell sits in the
            # lowest region, so each page reads back all ones
            out = lut[np.searchsorted(
                np.asarray(refs.for_bit(bit)), eff, side="right")]
        out = self._corrupt_pass_through(b, wl, out, lut)
        if count_read:
            b.reads += 1
            passes = SCHEME_PASSES.get(b.scheme or "", 1)
            exposed = b.pass_count >= 1
            exposed[wl] = False
            partial = exposed & (b.pass_count < passes)
            b.disturb[exposed] += 1.0
            if self.params.partial_disturb_multiplier > 1.0:
                b.disturb[partial] += self.params.partial_disturb_multiplier - 1.0
        return np.asarray(out, dtype=np.uint8)

    def _corrupt_pass_through(self, b: _Block, wl: int, out: np.ndarray,
                              lut: np.ndarray) -> np.ndarray:
        """Cells elsewhere on the bitline that cannot be switched off block
        the sensed current: the read of that bitline lands in the top bin."""
        if not self.mechanisms.pass_through:
            return out
        if b.v_pass >= VOLT_MAX + 80.0:
            return out
        blocked = np.zeros(out.shape, dtype=bool)
        for v in range(self.geometry.wordlines_per_block):
            if v == wl or b.pass_count[v] < 1:
                continue
            blocked |= self._effective(b, v) > b.v_pass
        if not np.any(blocked):
            return out
        severity = self.params.pass_through_severity
        if severity < 1.0:
            keep = b.gen.random(out.shape) >= severity
            blocked &= ~keep
        out = out.copy()
        out[blocked] = lut[-1]
        return out

    def expected_page_bits(self, block: int, page: int) -> np.ndarray:
        """Bits implied by the recorded cell states (array-level ground truth;
        program errors are already folded in)."""
        b = self._block(block)
        mode = "mlc" if b.downgraded else self.geometry.cell_mode
        wl, bit = self.page_address(block, page)
        state = b.state[wl]
        if np.any(state < 0):
            raise ValueError(f"wordline {wl} still mid-scheme")
        return _BIT_LUT[mode][state, bit]

    def sweep_voltages(self, block: int, page: int, step: float) -> np.ndarray:
        """Per-cell voltage estimates from a stepped-reference scan: each cell
        reports the midpoint of the bracketing pair, so error <= step/2.
        Diagnostic only; no counters move."""
        if step < 1.0 / FP_SCALE:
            raise ValueError("step below fixed-point resolution")
        b = self._block(block)
        wl, _ = self.page_address(block, page)
        eff = self._effective(b, wl)
        span = VOLT_MAX - VOLT_MIN
        n_bins = max(1, int(math.ceil(span / step)))
        idx = np.clip(np.floor((eff - VOLT_MIN) / step), 0, n_bins - 1)
        lo = VOLT_MIN + idx * step
        hi = np.minimum(lo + step, VOLT_MAX)
        return 0.5 * (lo + hi)

    # -------------------------------------------------------------- snapshots

    def export_snapshot(self, path) -> None:
        """Checkpoint geometry plus all realized block state (versioned)."""
        g = self.geometry
        header = {
            "version": _SNAPSHOT_VERSION,
            "now": self._now,
            "seed": self._seed,
            "geometry": {
                "channels": g.channels, "chips_per_channel": g.chips_per_channel,
                "dies_per_chip": g.dies_per_chip, "planes_per_die": g.planes_per_die,
                "blocks_per_plane": g.blocks_per_plane,
                "wordlines_per_block": g.wordlines_per_block,
                "cells_per_wordline": g.cells_per_wordline,
                "cell_mode": g.cell_mode,
            },
        }
        payload: dict[str, np.ndarray] = {
            "header": np.frombuffer(
                json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
        }
        for gid, b in sorted(self._blocks.items()):
            meta = np.array([b.pec, b.reads, int(b.downgraded), int(b.bad),
                             SCHEMES.index(b.scheme) if b.scheme else -1],
                            dtype=np.int64)
            p = f"b{gid}_"
            payload[p + "meta"] = meta
            payload[p + "vpass"] = np.array([b.v_pass])
            for name in ("stored", "z_ret", "z_dis", "mult_ret", "mult_dis",
                         "state", "pass_count", "prog_time", "prog_pec",
                         "disturb", "page_valid", "page_time"):
                payload[p + name] = getattr(b, name)
            for wl, pages in b.buffer.items():
                for bit, arr in pages.items():
                    payload[f"{p}buf_{wl}_{bit}"] = arr
        np.savez_compressed(path, **payload)

    def import_snapshot(self, path) -> None:
        """Restore a checkpoint into this array. Geometry must match; random
        streams restart, so replay equals the original run only in the
        restored state, not in draws made after the checkpoint."""
        with np.load(path) as data:
            header = json.loads(bytes(data["header"]).decode())
            if header["version"] != _SNAPSHOT_VERSION:
                raise ValueError(
                    f"snapshot version {header['version']} not supported")
            g = self.geometry
            for key, val in header["geometry"].items():
                if getattr(g, key) != val:
                    raise ValueError(f"snapshot geometry mismatch on {key}")
            self._now = float(header["now"])
            self._blocks.clear()
            gids = sorted({int(k.split("_")[0][1:]) for k in data.files
                           if k.startswith("b")})
            for gid in gids:
                b = self._block(gid)
                p = f"b{gid}_"
                meta = data[p + "meta"]
                b.pec = int(meta[0])
                b.reads = int(meta[1])
                b.downgraded = bool(meta[2])
                b.bad = bool(meta[3])
                b.scheme = SCHEMES[int(meta[4])] if meta[4] >= 0 else None
                b.v_pass = float(data[p + "vpass"][0])
                for name in ("stored", "z_ret", "z_dis", "mult_ret", "mult_dis",
                             "state", "pass_count", "prog_time", "prog_pec",
                             "disturb", "page_valid", "page_time"):
                    setattr(b, name, data[p + name].copy())
                b.buffer.clear()
                for key in data.files:
                    if key.startswith(p + "buf_"):
                        _, wl_s, bit_s = key[len(p):].split("_")
                        b.buffer.setdefault(int(wl_s), {})[int(bit_s)] = (
                            data[key].copy())
