"""Reliability mitigation built on the array primitives: shadow program
sequencing, neighbor-assisted re-reads, data refresh, read-reference
discovery, pass-voltage tuning, write-hotness segregation, multi-rate ECC
scheduling, and block downgrading.

Operations that need the full drive stack (address maps, the recovery
ladder) take a duck-typed host rather than importing it; `RefreshHost`
documents the required surface.
"""

from __future__ import annotations

import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .nand_array import (
    SCHEME_PASSES,
    CellArray,
    bits_from_states,
    states_from_bits,
)
from .voltage_model import (
    MODE_BIT_REFS,
    MODES,
    VOLT_MAX,
    VOLT_MIN,
    Condition,
    ReadRefSet,
    ThresholdModel,
)

# Boltzmann constant in eV/K, for the Arrhenius acceleration factor.
K_B_EV = 8.617333262e-5

# Cycle-count buckets for refresh-interval scaling: (min cycles, divisor).
DEFAULT_PEC_FACTORS: tuple[tuple[int, float], ...] = (
    (0, 1.0), (1000, 4.0), (2000, 12.0), (3000, 52.0))

REFRESH_KINDS = ("remap", "in_place", "hybrid", "read_reclaim")


# ------------------------------------------------------------- sequencing

def shadow_page_order(n_wordlines: int, mode: str) -> tuple[tuple[int, int], ...]:
    """Program order as (wordline, bit position) pairs, one per pulse pass.

    Low pages lead their wordline's upper pages by one neighbor-programming
    step per extra bit, so every cell's final pass happens after the
    neighbor shifts it would otherwise suffer from. Page numbers are dense
    and ascend in this order.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if n_wordlines < 1:
        raise ValueError("need at least one wordline")
    if mode == "slc":
        return tuple((w, 0) for w in range(n_wordlines))
    if mode == "mlc":
        last = n_wordlines - 1
        numbered = [(0, 0, 0)]
        numbered += [(2 * w - 1, w, 0) for w in range(1, n_wordlines)]
        numbered += [(2 * w + 2, w, 1) for w in range(last)]
        numbered.append((2 * last + 1, last, 1))
        return tuple((w, b) for _, w, b in sorted(numbered))
    order = []
    for step in range(n_wordlines + 2):
        for bit in range(3):
            w = step - bit
            if 0 <= w < n_wordlines:
                order.append((w, bit))
    return tuple(order)


# ------------------------------------------------- neighbor-assisted reads

@dataclass(frozen=True)
class NacResult:
    """Successful neighbor-assisted correction."""

    data: np.ndarray
    neighbor_state: int
    neighbor_states: np.ndarray
    attempts: tuple[int, ...]
    trail: tuple[np.ndarray, ...]


def nac_offsets(model: ThresholdModel, scheme: str, pec: int,
                k_wordline: float) -> np.ndarray:
    """Read-reference compensation per neighbor state: the coupling every
    victim bitline received from that state's final program pass."""
    mu, _ = model.composed_arrays(Condition(float(pec)))
    dv = np.zeros(len(mu))
    if scheme == "one_shot":
        dv[1:] = mu[1:] - mu[0]
    elif scheme == "two_step":
        temp = 0.5 * (mu[1] + mu[2])
        dv[1] = mu[1] - mu[0]
        dv[2] = mu[2] - temp
        dv[3] = mu[3] - temp
    elif scheme == "foggy_fine":
        dv[1] = mu[1] - mu[0]
        for s, lo in ((2, 2), (3, 2), (4, 4), (5, 4), (6, 6), (7, 6)):
            dv[s] = max(0.0, mu[s] - 0.5 * (mu[lo] + mu[lo + 1]))
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return k_wordline * dv


def nac_substitute(initial: np.ndarray, neighbor_states: np.ndarray,
                   offsets: np.ndarray,
                   read_at: Callable[[float], np.ndarray],
                   try_decode: Callable[[np.ndarray], np.ndarray | None],
                   ) -> NacResult | None:
    """Core neighbor-assisted loop: walk neighbor states from erased upward,
    re-read the page with references raised by that state's compensation,
    substitute only the bitlines under that state, and stop at the first
    decode success. Substitutions accumulate across states."""
    current = np.array(initial, dtype=np.uint8, copy=True)
    attempts: list[int] = []
    trail: list[np.ndarray] = []
    for s, off in enumerate(offsets):
        mask = neighbor_states == s
        if not mask.any():
            continue
        reread = read_at(float(off))
        current[mask] = reread[mask]
        attempts.append(s)
        trail.append(current.copy())
        decoded = try_decode(current)
        if decoded is not None:
            return NacResult(
                data=decoded, neighbor_state=s,
                neighbor_states=neighbor_states,
                attempts=tuple(attempts), trail=tuple(trail))
    return None


def nac_correct(array: CellArray, block: int, page: int, refs: ReadRefSet,
                initial: np.ndarray,
                try_decode: Callable[[np.ndarray], np.ndarray | None],
                *, count_read: bool = True) -> NacResult | None:
    """Neighbor-assisted correction of one failed page.

    Classifies every bitline by the state of the cell on the wordline above,
    then applies `nac_substitute`. Returns None when no upper neighbor is
    fully programmed or every compensation pass still fails to decode.
    """
    wl, _ = array.page_address(block, page)
    state = array.block_state(block)
    upper = wl + 1
    if state.scheme is None or upper >= array.geometry.wordlines_per_block:
        return None
    if int(state.pass_count[upper]) != SCHEME_PASSES[state.scheme]:
        return None

    mode = array.block_mode(block)
    bits = array.block_bits(block)
    neighbor_pages = [
        array.read_page(block, upper * bits + b, refs, count_read=count_read)
        for b in range(bits)]
    neighbor_states = states_from_bits(mode, np.stack(neighbor_pages))
    offsets = nac_offsets(array.threshold_model(mode), state.scheme,
                          state.pec, array.coefficients.k_wordline)

    def read_at(off: float) -> np.ndarray:
        shifted = refs.shifted((off,) * len(refs))
        return array.read_page(block, page, shifted, count_read=count_read)

    return nac_substitute(initial, neighbor_states, offsets, read_at,
                          try_decode)


# ----------------------------------------------------------------- refresh

class RefreshHost(Protocol):
    """Drive surface refresh needs; the controller satisfies it."""

    array: CellArray

    def closed_blocks(self) -> Iterable[int]: ...

    def refs_for(self, block: int) -> ReadRefSet: ...

    def read_corrected(self, block: int, page: int) -> np.ndarray | None: ...

    def migrate_block(self, block: int) -> None: ...

    def is_hot_block(self, block: int) -> bool: ...


@dataclass(frozen=True)
class RefreshPolicy:
    """Periodic refresh configuration.

    `right_shift_limit` is the hybrid cut: pages whose raw read shows more
    right-shifted errors than this cannot be repaired by pulses that only
    raise voltages, so the whole block is remapped instead.
    """

    kind: str
    base_interval_s: float = 7 * 86400.0
    temperature_k: float = 313.0
    ea_ev: float = 1.1
    t_ref_k: float = 313.0
    pec_factors: tuple[tuple[int, float], ...] = DEFAULT_PEC_FACTORS
    right_shift_limit: int = 8
    read_ceiling: int = 100_000

    def __post_init__(self) -> None:
        if self.kind not in REFRESH_KINDS:
            raise ValueError(f"unknown refresh kind {self.kind!r}")
        if self.base_interval_s <= 0:
            raise ValueError("interval must be positive")
        if self.right_shift_limit < 0 or self.read_ceiling < 0:
            raise ValueError("thresholds must be >= 0")
        factors = [f for _, f in self.pec_factors]
        if factors != sorted(factors) or any(f < 1.0 for f in factors):
            raise ValueError("cycle factors must be >= 1 and non-decreasing")


@dataclass
class RefreshReport:
    checked: int = 0
    remapped: list[int] = field(default_factory=list)
    in_place: list[int] = field(default_factory=list)
    reclaimed: list[int] = field(default_factory=list)
    skipped_hot: list[int] = field(default_factory=list)
    pulses: int = 0
    uncorrectable: int = 0


def adaptive_interval(base_s: float, pec: int, temperature_k: float, *,
                      ea_ev: float = 1.1, t_ref_k: float = 313.0,
                      pec_factors: tuple[tuple[int, float], ...]
                      = DEFAULT_PEC_FACTORS) -> float:
    """Refresh period shortened by wear and temperature acceleration.

    The thermal factor follows an Arrhenius law around the reference
    temperature; the wear factor is a configured step function of cycles.
    """
    if base_s <= 0:
        raise ValueError("base interval must be positive")
    af_pec = 1.0
    for min_pec, factor in pec_factors:
        if pec >= min_pec:
            af_pec = factor
    af_temp = math.exp((ea_ev / K_B_EV) * (1.0 / t_ref_k - 1.0 / temperature_k))
    return base_s / (af_pec * af_temp)


def right_shift_errors(raw_pages: np.ndarray, corrected_pages: np.ndarray,
                       mode: str) -> np.ndarray:
    """Per-page counts of errors caused by cells reading above their true
    state; only these are out of reach of raise-only reprogramming."""
    raw_states = states_from_bits(mode, raw_pages)
    true_states = states_from_bits(mode, corrected_pages)
    right = raw_states > true_states
    counts = np.zeros(raw_pages.shape[0], dtype=np.int64)
    for b in range(raw_pages.shape[0]):
        counts[b] = int(np.count_nonzero(
            right & (raw_pages[b] != corrected_pages[b])))
    return counts


def _collect_wordline(host: RefreshHost, block: int, wl: int,
                      refs: ReadRefSet) -> tuple[np.ndarray, np.ndarray, int]:
    """Raw and ladder-corrected bits for every page of one wordline.

    Invalid pages keep their raw content; a valid page the ladder cannot
    recover is counted and kept raw so the rewrite preserves it as-is.
    """
    array = host.array
    bits = array.block_bits(block)
    valid = array.block_state(block).page_valid
    raw, corrected, lost = [], [], 0
    for b in range(bits):
        page = wl * bits + b
        raw_bits = array.read_page(block, page, refs)
        raw.append(raw_bits)
        if valid[page]:
            good = host.read_corrected(block, page)
            if good is None:
                lost += 1
                good = raw_bits
            corrected.append(good)
        else:
            corrected.append(raw_bits)
    return np.stack(raw), np.stack(corrected), lost


def _refresh_in_place(host: RefreshHost, block: int,
                      report: RefreshReport) -> None:
    array = host.array
    refs = host.refs_for(block)
    mode = array.block_mode(block)
    bits = array.block_bits(block)
    valid = array.block_state(block).page_valid
    for wl in range(array.geometry.wordlines_per_block):
        if not valid[wl * bits:(wl + 1) * bits].any():
            continue
        _, corrected, lost = _collect_wordline(host, block, wl, refs)
        report.uncorrectable += lost
        states = states_from_bits(mode, corrected)
        report.pulses += array.reprogram_in_place(block, wl, states)


def _max_right_shift(host: RefreshHost, block: int) -> int:
    array = host.array
    refs = host.refs_for(block)
    mode = array.block_mode(block)
    bits = array.block_bits(block)
    valid = array.block_state(block).page_valid
    worst = 0
    for wl in range(array.geometry.wordlines_per_block):
        page_slice = valid[wl * bits:(wl + 1) * bits]
        if not page_slice.any():
            continue
        raw, corrected, _ = _collect_wordline(host, block, wl, refs)
        counts = right_shift_errors(raw, corrected, mode)
        counts[page_slice == 0] = 0
        worst = max(worst, int(counts.max()))
    return worst


def refresh_tick(host: RefreshHost, policy: RefreshPolicy) -> RefreshReport:
    """One refresh pass over the closed blocks.

    remap rewrites due blocks elsewhere; in_place re-pulses cells back into
    their state windows without an erase; hybrid picks per block by whether
    the damage is pulse-reachable; read_reclaim rewrites blocks whose read
    counter passed the ceiling. Write-hot blocks are left alone: their data
    is rewritten by the host long before retention matters.
    """
    array = host.array
    report = RefreshReport()
    now = array.now
    for block in host.closed_blocks():
        state = array.block_state(block)
        if state.bad:
            continue
        report.checked += 1
        if policy.kind == "read_reclaim":
            if state.reads > policy.read_ceiling:
                host.migrate_block(block)
                report.reclaimed.append(block)
            continue
        valid = state.page_valid.astype(bool)
        if not valid.any():
            continue
        if host.is_hot_block(block):
            report.skipped_hot.append(block)
            continue
        age = now - float(state.page_time[valid].min())
        due = adaptive_interval(
            policy.base_interval_s, state.pec, policy.temperature_k,
            ea_ev=policy.ea_ev, t_ref_k=policy.t_ref_k,
            pec_factors=policy.pec_factors)
        if age < due:
            continue
        if policy.kind == "remap":
            host.migrate_block(block)
            report.remapped.append(block)
        elif policy.kind == "in_place":
            _refresh_in_place(host, block, report)
            report.in_place.append(block)
        else:
            if _max_right_shift(host, block) <= policy.right_shift_limit:
                _refresh_in_place(host, block, report)
                report.in_place.append(block)
            else:
                host.migrate_block(block)
                report.remapped.append(block)
    return report


# ------------------------------------------------------ reference discovery

class DisparityError(RuntimeError):
    """Disparity-based search hit a non-monotone or degenerate profile."""


def lsb_fraction_reader(array: CellArray, block: int, wl: int,
                        *, count_read: bool = True) -> Callable[[float], float]:
    """Single-reference probe built from low-page reads.

    The low page resolves through exactly one reference, so a read with the
    center reference planted at the probe voltage counts the cells below it;
    the other references only pad out a valid set.
    """
    mode = array.block_mode(block)
    bits = array.block_bits(block)
    center = MODE_BIT_REFS[mode][0][0]
    n_refs = {"slc": 1, "mlc": 3, "tlc": 7}[mode]
    page = wl * bits

    def fraction_below(v: float) -> float:
        refs = ReadRefSet(tuple(
            v + (i - center) / 64.0 for i in range(n_refs)))
        bits_read = array.read_page(block, page, refs, count_read=count_read)
        return float(bits_read.mean())

    return fraction_below


def _bisect_fraction(fraction_below: Callable[[float], float], lo: float,
                     hi: float, target: float, resolution: float, tol: float,
                     probes: list[tuple[float, float]],
                     seed: float | None = None) -> float:
    def probe(v: float) -> float:
        f = fraction_below(v)
        for v_prev, f_prev in probes:
            if (v_prev < v and f_prev > f) or (v_prev > v and f_prev < f):
                raise DisparityError(
                    f"cell-count profile not monotone: fraction {f_prev:.4f} "
                    f"at {v_prev:.2f} vs {f:.4f} at {v:.2f}")
        probes.append((v, f))
        return f

    if seed is not None and lo < seed < hi:
        f = probe(seed)
        if abs(f - target) <= tol:
            return seed
        if f < target:
            lo = seed
        else:
            hi = seed
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        f = probe(mid)
        if abs(f - target) <= tol:
            return mid
        if f < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def disparity_vref_search(fraction_below: Callable[[float], float], mode: str,
                          *, start: Sequence[float] | None = None,
                          lo: float = VOLT_MIN, hi: float = VOLT_MAX,
                          resolution: float = 1.0,
                          tol: float = 0.01) -> ReadRefSet:
    """Full read-reference set from cell-count quantiles.

    With scrambled data every state holds an equal share of cells, so the
    k-th boundary sits at the k/n cumulative fraction. The center boundary
    is located first and the halves are split recursively, each by binary
    search, so one boundary costs at most ceil(log2(range/resolution))
    probes. `start` seeds each boundary's search with the current reference,
    which resolves in a single probe when the data has not drifted.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    seeds: tuple[float, ...] | None = None
    if start is not None:
        seeds = tuple(float(v) for v in start)
        if len(seeds) != {"slc": 1, "mlc": 3, "tlc": 7}[mode]:
            raise ValueError("need one starting reference per boundary")
    probes: list[tuple[float, float]] = []

    def search(a: float, b: float, target: float, k: int) -> float:
        return _bisect_fraction(fraction_below, a, b, target, resolution,
                                tol, probes,
                                seeds[k] if seeds is not None else None)

    if mode == "slc":
        found = [search(lo, hi, 0.5, 0)]
    elif mode == "mlc":
        v_b = search(lo, hi, 0.50, 1)
        v_a = search(lo, v_b, 0.25, 0)
        v_c = search(v_b, hi, 0.75, 2)
        found = [v_a, v_b, v_c]
    else:
        v_d = search(lo, hi, 4 / 8, 3)
        v_b = search(lo, v_d, 2 / 8, 1)
        v_a = search(lo, v_b, 1 / 8, 0)
        v_c = search(v_b, v_d, 3 / 8, 2)
        v_f = search(v_d, hi, 6 / 8, 5)
        v_e = search(v_d, v_f, 5 / 8, 4)
        v_g = search(v_f, hi, 7 / 8, 6)
        found = [v_a, v_b, v_c, v_d, v_e, v_f, v_g]
    try:
        return ReadRefSet(tuple(found))
    except ValueError as err:
        raise DisparityError(f"degenerate boundaries {found}: {err}") from err


def sampling_vopt_discovery(read_errors: Callable[[float], int | None],
                            start: float = 0.0, *, dv: float = 2.0,
                            lo: float = -60.0, hi: float = 60.0,
                            ) -> tuple[float, bool]:
    """Greedy per-block reference descent on the corrected-error count.

    Walks downward while the count does not worsen, and only tries the
    upward direction when no downward step was taken. `read_errors` returns
    None when a probe fails to decode; if every probe fails the start value
    is kept and the flag comes back False.
    """
    if dv <= 0:
        raise ValueError("step must be positive")
    n0 = read_errors(start)
    prev = math.inf if n0 is None else n0
    ok = n0 is not None
    v = start
    while v - dv >= lo:
        n = read_errors(v - dv)
        if n is None or n > prev:
            break
        v -= dv
        prev = n
        ok = True
    if v == start:
        while v + dv <= hi:
            n = read_errors(v + dv)
            if n is None or n > prev:
                break
            v += dv
            prev = n
            ok = True
    return (v, True) if ok else (start, False)


# ------------------------------------------------------- pass-voltage tuning

def vpass_tune(array: CellArray, block: int, ecc_t: int, worst_errors: int,
               *, resolution: float = 1.0) -> float:
    """Lower the block's pass voltage to the margin ECC leaves.

    With M = capability minus the worst codeword's current errors, the
    tuned value is the lowest measured voltage that at most M cells exceed;
    the read path then stresses fewer cells while the extra misreads stay
    correctable. Sweep estimates carry half a step of error, so half a step
    is added back to keep the guarantee. Without margin the current setting
    is kept.
    """
    margin = ecc_t - worst_errors
    current = array.block_state(block).v_pass
    if margin <= 0:
        return current
    bits = array.block_bits(block)
    pass_count = array.block_state(block).pass_count
    rows = [array.sweep_voltages(block, wl * bits, resolution)
            for wl in range(array.geometry.wordlines_per_block)
            if pass_count[wl] >= 1]
    if not rows:
        return current
    volts = np.sort(np.concatenate(rows))[::-1]
    tuned = float(volts[min(margin, len(volts) - 1)]) + 0.5 * resolution
    array.set_v_pass(block, tuned)
    return tuned


# --------------------------------------------------------------- hot data

def classify_hot(writes: Sequence[int], window: int, k: int) -> set[int]:
    """Addresses with at least k writes among the last `window` writes."""
    if window < 1 or k < 1:
        raise ValueError("window and k must be >= 1")
    recent = Counter(list(writes)[-window:])
    return {lba for lba, n in recent.items() if n >= k}


class WarmState:
    """Rolling write-frequency tracker for hot/cold placement."""

    def __init__(self, window: int, k: int) -> None:
        if window < 1 or k < 1:
            raise ValueError("window and k must be >= 1")
        self.window = window
        self.k = k
        self._recent: deque[int] = deque()
        self._counts: Counter[int] = Counter()

    def record_write(self, lba: int) -> None:
        self._recent.append(lba)
        self._counts[lba] += 1
        if len(self._recent) > self.window:
            old = self._recent.popleft()
            self._counts[old] -= 1
            if self._counts[old] == 0:
                del self._counts[old]

    def is_hot(self, lba: int) -> bool:
        return self._counts.get(lba, 0) >= self.k

    def hot_set(self) -> set[int]:
        return {lba for lba, n in self._counts.items() if n >= self.k}


def place(warm: WarmState, lba: int) -> str:
    """Pool label for the next write of this address."""
    return "hot" if warm.is_hot(lba) else "cold"


# ------------------------------------------------------------ multi-rate ECC

@dataclass
class EngineSpan:
    """Cycles served under one code rate, with the measured amplification
    and the overprovisioning that rate frees up."""

    pec_span: float
    op: float
    wa: float


@dataclass
class MultiRateState:
    """Progression through progressively stronger code rates.

    `thresholds[i]` is the raw-error ceiling engine i tolerates; crossing
    the last one ends the device's life. New writes use the current engine;
    old data keeps its original engine until rewritten, which the host
    tracks per page.
    """

    rates: tuple[float, ...]
    thresholds: tuple[float, ...]
    index: int = 0
    history: list[tuple[float, int, int]] = field(default_factory=list)
    spans: list[EngineSpan] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.rates) != len(self.thresholds):
            raise ValueError("one threshold per engine")
        if any(not 0 < r <= 1 for r in self.rates):
            raise ValueError("code rates must be in (0, 1]")
        if any(b >= a for a, b in zip(self.rates, self.rates[1:])):
            raise ValueError("code rates must be strictly decreasing")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing")
        if not 0 <= self.index < len(self.rates):
            raise ValueError("engine index out of range")


def multirate_step(state: MultiRateState, measured_rber: float,
                   pec: float) -> str:
    """Advance the engine selection after an error measurement.

    Returns "steady", "switched", or "end_of_life"; the index never moves
    backward.
    """
    switched = False
    while measured_rber > state.thresholds[state.index]:
        if state.index == len(state.rates) - 1:
            state.history.append((pec, state.index, state.index))
            return "end_of_life"
        state.history.append((pec, state.index, state.index + 1))
        state.index += 1
        switched = True
    return "switched" if switched else "steady"


def multirate_op(rate: float, anchor_rate: float, anchor_op: float) -> float:
    """Overprovisioning at a weaker code, holding physical capacity fixed
    against a device provisioned at the anchor rate."""
    return (1.0 + anchor_op) * rate / anchor_rate - 1.0


def multirate_lifetime(state: MultiRateState, dwpd: float,
                       r_compress: float) -> float:
    """Total lifetime in years over the recorded engine spans.

    Each span contributes its cycles scaled by the space that rate leaves
    for the host and divided by the write pressure while it was active;
    with a single span this is the standard drive-lifetime formula.
    """
    if dwpd <= 0 or r_compress <= 0:
        raise ValueError("write rate and compression must be positive")
    if not state.spans:
        raise ValueError("no engine spans recorded")
    days = sum(s.pec_span * (1.0 + s.op) / (dwpd * s.wa * r_compress)
               for s in state.spans)
    return days / 365.0


# ------------------------------------------------------------- downgrading

def downgrade_block(array: CellArray, block: int) -> int:
    """Retire a worn triple-bit block to two-bit use; returns the new page
    count (two thirds of the original)."""
    array.set_downgraded(block, True)
    return array.pages_per_block(block)
