"""Drive-level orchestration: logical-to-physical mapping, superblock write
sequencing with optional plane parity, wear-aware allocation, garbage
collection, bad-block handling, scrambling, and the staged read-correction
ladder.

One controller owns one `CellArray` and is the single mutator of its state.
The host-visible unit is the logical block (LB): one physical page holding
`codewords_per_page` ECC codewords whose data bits carry the scrambled
payload plus a 32-bit checksum.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ._rng import substream
from .ecc import (
    CRC_BITS,
    BoundarySpec,
    CodewordSpec,
    LdpcCode,
    LlrWord,
    build_ldpc,
    crc_attach,
    crc_check,
    crc_from_bits,
    crc_to_bits,
    hard_decode,
    ldpc_decode,
    ldpc_extract_data,
    ldpc_encode,
    soft_read,
)
from .mitigation import WarmState, nac_correct, place, shadow_page_order
from .nand_array import CellArray, bits_from_states
from .voltage_model import (
    MODE_BIT_REFS,
    ReadRefSet,
    birth_refs,
    composed_stats,
    optimal_read_refs,
)

ECC_MODES = ("hard", "ldpc")
FREE_SELECTIONS = ("wear_min", "round_robin")

# Maximal-length 16-bit register, taps at bits 16, 15, 13, and 4.
LFSR_WIDTH = 16
LFSR_MASK = (1 << LFSR_WIDTH) - 1
LFSR_TAPS = (15, 14, 12, 3)
LFSR_PERIOD = LFSR_MASK


class DeviceFullError(RuntimeError):
    """No block can be reclaimed; every page slot holds live data."""


class ReservedExhaustedError(RuntimeError):
    """A plane ran out of reserved blocks for bad-block remapping."""


# --------------------------------------------------------------- scrambling

_LFSR_CYCLE: np.ndarray | None = None
_LFSR_PHASE: np.ndarray | None = None


def _lfsr_tables() -> tuple[np.ndarray, np.ndarray]:
    """One full output cycle plus each state's phase within it; a maximal
    register makes every seed's stream a rotation of the same cycle."""
    global _LFSR_CYCLE, _LFSR_PHASE
    if _LFSR_CYCLE is None:
        cycle = np.empty(LFSR_PERIOD, dtype=np.uint8)
        phase = np.zeros(LFSR_MASK + 1, dtype=np.int32)
        state = 1
        for i in range(LFSR_PERIOD):
            phase[state] = i
            cycle[i] = (state >> (LFSR_WIDTH - 1)) & 1
            fb = 0
            for t in LFSR_TAPS:
                fb ^= state >> t
            state = ((state << 1) | (fb & 1)) & LFSR_MASK
        _LFSR_CYCLE, _LFSR_PHASE = cycle, phase
    return _LFSR_CYCLE, _LFSR_PHASE


def lfsr_stream(seed: int, n: int) -> np.ndarray:
    """First n output bits of the register started from a nonzero seed."""
    state = seed & LFSR_MASK
    if state == 0:
        raise ValueError("seed must be nonzero in the low 16 bits")
    cycle, phase = _lfsr_tables()
    idx = (int(phase[state]) + np.arange(n)) % LFSR_PERIOD
    return cycle[idx]


def _lba_seed(lba: int) -> int:
    # Keys the stream to the logical address; the register cannot sit at 0.
    return (lba % LFSR_PERIOD) + 1


def scramble(data: np.ndarray, lba: int) -> np.ndarray:
    """XOR the bit array with the address-seeded register stream."""
    bits = np.asarray(data, dtype=np.uint8)
    return bits ^ lfsr_stream(_lba_seed(lba), bits.size)


def descramble(data: np.ndarray, lba: int) -> np.ndarray:
    return scramble(data, lba)


# ----------------------------------------------------------- failure model

def parity_analytics(p_hgbb: float, p_ecfr: float, K: int, c: int,
                     d: int) -> tuple[float, float]:
    """Logical-block and plane-parity failure probabilities.

    An LB access fails when it sits in an undetected bad block or any of
    its K codewords fails; parity recovery then fails when any of the other
    c*d - 1 logical blocks in the group also fails.
    """
    if not (0.0 <= p_hgbb <= 1.0 and 0.0 <= p_ecfr <= 1.0):
        raise ValueError("probabilities must be in [0, 1]")
    if K < 1 or c < 1 or d < 1:
        raise ValueError("K, c, d must be >= 1")
    p_lbfail = p_hgbb + (1.0 - p_hgbb) * (1.0 - (1.0 - p_ecfr) ** K)
    p_parity = p_lbfail * (1.0 - (1.0 - p_lbfail) ** (c * d - 1))
    return p_lbfail, p_parity


# ------------------------------------------------------------ configuration

@dataclass(frozen=True)
class ControllerConfig:
    """Knobs the drive firmware would expose.

    `op_fraction` is spare capacity relative to the advertised capacity;
    `reserved_fraction` holds back per-plane blocks for bad-block remaps
    and `obb_fraction` marks that share of blocks unusable at the factory
    scan. `gc_copyback` migrates raw bits without decoding, so latent
    errors propagate into the copy.
    """

    codeword: CodewordSpec = CodewordSpec(l=1024, k=896, capability_t=40)
    ecc_mode: str = "hard"
    op_fraction: float = 0.15
    parity_enabled: bool = False
    gc_watermark: int = 2
    reserved_fraction: float = 0.025
    obb_fraction: float = 0.0
    read_retries: int = 3
    soft_levels: int = 3
    soft_spacing: float = 4.0
    rewrite_on_recovery: bool = True
    gc_copyback: bool = False
    scramble_enabled: bool = True
    nac_enabled: bool = True
    free_selection: str = "wear_min"
    warm_enabled: bool = False
    warm_window: int = 4096
    warm_k: int = 3
    trace_enabled: bool = False
    ldpc_seed: int = 5

    def __post_init__(self) -> None:
        if self.ecc_mode not in ECC_MODES:
            raise ValueError(f"unknown ecc mode {self.ecc_mode!r}")
        if self.free_selection not in FREE_SELECTIONS:
            raise ValueError(f"unknown selection {self.free_selection!r}")
        if self.op_fraction < 0:
            raise ValueError("spare fraction must be >= 0")
        if not 0 <= self.obb_fraction <= self.reserved_fraction:
            raise ValueError("factory-bad fraction must fit in the reserve")
        if self.gc_watermark < 1:
            raise ValueError("watermark must be >= 1")
        if self.read_retries < 0 or self.soft_levels < 0:
            raise ValueError("retry and soft-level counts must be >= 0")


@dataclass
class WriteStats:
    """Page-granularity write and outcome counters."""

    host_pages: int = 0
    nand_pages: int = 0
    gc_migrated: int = 0
    parity_pages: int = 0
    refresh_pages: int = 0
    recovery_rewrites: int = 0
    gbb_migrated: int = 0
    gc_runs: int = 0
    blocks_erased: int = 0
    uncorrectable_reads: int = 0
    data_lost_pages: int = 0

    @property
    def write_amplification(self) -> float:
        if self.host_pages == 0:
            return 1.0
        return self.nand_pages / self.host_pages


@dataclass(frozen=True)
class TraceEvent:
    """One host operation for the event log."""

    timestamp: float
    op: str
    lba: int
    block: int
    page: int
    stages: str
    errors: int


@dataclass
class _Superblock:
    """Same-ID blocks across every plane; the write and reclaim unit."""

    sid: int
    members: list[int | None]  # per plane; None once the block went bad
    parity_planes: tuple[int, ...]
    parity_valid: bool = True
    slots_written: int = 0

    def alive(self) -> list[int]:
        return [b for b in self.members if b is not None]

    def data_planes(self) -> list[int]:
        return [p for p, b in enumerate(self.members)
                if b is not None and p not in self.parity_planes]


@dataclass
class _OpenState:
    sb: _Superblock
    slot: int = 0
    pos: int = 0  # index into the superblock's data planes for this slot
    xor_acc: dict[int, np.ndarray] = field(default_factory=dict)


class Controller:
    """Flash translation layer over one cell array."""

    def __init__(self, array: CellArray, config: ControllerConfig
                 = ControllerConfig(), *, seed: int = 0) -> None:
        g = array.geometry
        if g.cells_per_wordline % config.codeword.l != 0:
            raise ValueError("page must hold a whole number of codewords")
        if config.parity_enabled and g.dies < 2:
            raise ValueError("parity needs at least two dies")
        self.array = array
        self.config = config
        self.geometry = g
        self.scheme = {"slc": "one_shot", "mlc": "two_step",
                       "tlc": "foggy_fine"}[g.cell_mode]
        self.page_bits = g.cells_per_wordline
        self.codewords_per_page = self.page_bits // config.codeword.l
        self.lb_bits = self.codewords_per_page * config.codeword.k - CRC_BITS
        if self.lb_bits <= 0:
            raise ValueError("codeword data bits cannot hold the checksum")
        self._order = shadow_page_order(g.wordlines_per_block, g.cell_mode)
        self._slot_of_page = {
            wl * g.bits_per_cell + bit: j
            for j, (wl, bit) in enumerate(self._order)}
        self._rng = substream(seed, "controller")
        self._code: LdpcCode | None = None
        if config.ecc_mode == "ldpc":
            self._code = build_ldpc(config.codeword, seed=config.ldpc_seed)

        per_plane = g.blocks_per_plane
        self._reserved_count = (math.ceil(per_plane * config.reserved_fraction)
                                if config.reserved_fraction > 0 else 0)
        self._general_sids = per_plane - self._reserved_count
        if self._general_sids < 1:
            raise ValueError("reserve leaves no usable blocks")
        if config.parity_enabled:
            last_die = g.dies - 1
            self._parity_planes = tuple(
                last_die * g.planes_per_die + q
                for q in range(g.planes_per_die))
        else:
            self._parity_planes = ()

        # Per-plane stacks of factory-reserved blocks, highest IDs first.
        self._reserved: list[list[int]] = [
            [g.block_id(p, i)
             for i in range(per_plane - 1, self._general_sids - 1, -1)]
            for p in range(g.planes)]
        self._remap: dict[tuple[int, int], int] = {}
        self.obb_blocks: set[int] = set()
        self.gbb_blocks: set[int] = set()
        self._scan_done = False
        self.obb_scan()

        self._superblocks = [self._build_superblock(s)
                             for s in range(self._general_sids)]
        self._free_blocks: set[int] = {
            b for sb in self._superblocks for b in sb.alive()}
        self._open: dict[str, _OpenState | None] = {"cold": None, "hot": None}
        self._block_stream: dict[int, str] = {}
        self._relocating = False
        self._rr_next_sid = 0

        self.map: dict[int, tuple[int, int]] = {}
        self._page_lba: dict[tuple[int, int], int] = {}
        self._truth: dict[tuple[int, int], np.ndarray] = {}
        self._valid_count: dict[int, int] = {}
        self._block_refs: dict[int, ReadRefSet] = {}
        self._scramble_cache: dict[int, np.ndarray] = {}
        self.warm = (WarmState(config.warm_window, config.warm_k)
                     if config.warm_enabled else None)
        self.stats = WriteStats()
        self.trace: list[TraceEvent] = []

        data_positions = sum(len(sb.data_planes())
                             for sb in self._superblocks)
        self.capacity_lbas = int(
            data_positions * g.pages_per_block / (1.0 + config.op_fraction))

    # -------------------------------------------------------- bad blocks

    def obb_scan(self) -> None:
        """Factory scan: mark the configured share of blocks bad at birth
        and remap each to a reserved block in the same plane."""
        if self._scan_done:
            raise RuntimeError("factory scan already ran")
        self._scan_done = True
        g = self.geometry
        n_bad = int(round(self._general_sids * self.config.obb_fraction))
        for p in range(g.planes):
            for sid in self._rng.choice(self._general_sids, size=n_bad,
                                        replace=False):
                block = g.block_id(p, int(sid))
                self.obb_blocks.add(block)
                self.array.mark_bad(block)
                self._remap[(p, int(sid))] = self._take_reserved(p)

    def _take_reserved(self, plane: int) -> int:
        if not self._reserved[plane]:
            raise ReservedExhaustedError(f"plane {plane} has no spare blocks")
        return self._reserved[plane].pop()

    def _build_superblock(self, sid: int) -> _Superblock:
        members: list[int | None] = []
        for p in range(self.geometry.planes):
            block = self._remap.get((p, sid), self.geometry.block_id(p, sid))
            members.append(None if block in self.gbb_blocks else block)
        return _Superblock(sid, members, self._parity_planes)

    def mark_gbb(self, block: int) -> None:
        """Handle a failed program or erase: retire the block, salvage what
        it held, and move the rest of its superblock out."""
        if block in self.gbb_blocks:
            return
        self.gbb_blocks.add(block)
        if not self.array.is_bad(block):
            self.array.mark_bad(block)
        self._free_blocks.discard(block)
        sb = self._owning_superblock(block)
        plane = self.geometry.plane_of_block(block)
        stream = self._block_stream.get(block, "cold")
        for st, open_state in list(self._open.items()):
            if open_state is not None and open_state.sb.sid == sb.sid:
                self._open[st] = None
        was_relocating = self._relocating
        self._relocating = True
        try:
            # Salvage the failed block first: parity can reconstruct pages
            # the block itself may no longer return.
            for page in self._valid_pages(block):
                lba = self._page_lba[(block, page)]
                img = self._parity_recover(block, page)
                if img is None:
                    img, _ = self._ladder(block, page)
                self._unmap(block, page)
                if img is None:
                    self.stats.data_lost_pages += 1
                    self.map.pop(lba, None)
                else:
                    self._place_image(lba, img, stream)
                    self.stats.gbb_migrated += 1
            sb.members[plane] = None
            for member in sb.alive():
                if member in self._free_blocks:
                    continue
                for page in self._valid_pages(member):
                    lba = self._page_lba[(member, page)]
                    img, _ = self._ladder(member, page)
                    self._unmap(member, page)
                    if img is None:
                        self.stats.data_lost_pages += 1
                        self.map.pop(lba, None)
                    else:
                        self._place_image(lba, img, stream)
                        self.stats.gbb_migrated += 1
                self._erase_into_pool(member)
        finally:
            self._relocating = was_relocating
        for page in range(self.geometry.pages_per_block):
            self._truth.pop((block, page), None)
        fresh = self._take_reserved(plane)
        sb.members[plane] = fresh
        self._free_blocks.add(fresh)
        sb.parity_valid = True
        sb.slots_written = 0

    def _owning_superblock(self, block: int) -> _Superblock:
        for sb in self._superblocks:
            if block in sb.members:
                return sb
        raise ValueError(f"block {block} is not in any superblock")

    # -------------------------------------------------------- allocation

    def select_free_block(self) -> int:
        """Wear-leveling pick from the free list: fewest cycles, then
        lowest index. An empty list reclaims space first."""
        if not self._free_blocks:
            self.garbage_collect()
        return min(self._free_blocks,
                   key=lambda b: (self.array.block_state(b).pec, b))

    def _free_sids(self) -> list[_Superblock]:
        out = []
        for sb in self._superblocks:
            alive = sb.alive()
            if (alive and sb.data_planes()
                    and all(b in self._free_blocks for b in alive)):
                out.append(sb)
        return out

    def _open_superblock(self, stream: str) -> _OpenState:
        candidates = self._free_sids()
        if not candidates:
            raise DeviceFullError("no erased superblock to open")
        if self.config.free_selection == "round_robin":
            sb = next((s for s in candidates if s.sid >= self._rr_next_sid),
                      candidates[0])
            self._rr_next_sid = sb.sid + 1
        else:
            sb = min(candidates, key=lambda s: (
                min(self.array.block_state(b).pec for b in s.alive()),
                s.sid))
        for b in sb.alive():
            self._free_blocks.discard(b)
            self._block_stream[b] = stream
            self._block_refs.pop(b, None)
        sb.parity_valid = True
        sb.slots_written = 0
        return _OpenState(sb=sb)

    @property
    def _watermark_sids(self) -> int:
        return max(1, math.ceil(self.config.gc_watermark
                                / self.geometry.planes))

    def _placement_slack(self) -> int:
        """Data-page slots still writable without reclaiming anything."""
        ppb = self.geometry.pages_per_block
        slack = 0
        for st in self._open.values():
            if st is not None:
                width = len(st.sb.data_planes())
                slack += (ppb - st.slot) * width - st.pos
        slack += sum(len(sb.data_planes()) * ppb for sb in self._free_sids())
        return slack

    def _maybe_collect(self) -> None:
        """Steady-state compaction: keep free superblocks at the watermark
        while room to migrate still exists."""
        if self._relocating:
            return
        for _ in range(len(self._superblocks)):
            if len(self._free_sids()) >= self._watermark_sids:
                break
            try:
                self.garbage_collect()
            except DeviceFullError:
                break

    def _ensure_open(self, stream: str) -> _OpenState:
        state = self._open[stream]
        if state is not None:
            return state
        self._maybe_collect()
        state = self._open_superblock(stream)
        self._open[stream] = state
        return state

    # ------------------------------------------------------------ writes

    def host_write(self, lba: int, data: np.ndarray) -> None:
        """Scramble, checksum, encode, and program one logical block."""
        if not 0 <= lba < self.capacity_lbas:
            raise ValueError(f"lba {lba} outside advertised capacity")
        bits = np.asarray(data, dtype=np.uint8)
        if bits.shape != (self.lb_bits,):
            raise ValueError(f"payload must be {self.lb_bits} bits")
        stream = "cold"
        if self.warm is not None:
            self.warm.record_write(lba)
            stream = place(self.warm, lba)
        image = self._encode(lba, bits)
        block, page = self._place_image(lba, image, stream)
        self.stats.host_pages += 1
        self._maybe_collect()
        if self.config.trace_enabled:
            self.trace.append(TraceEvent(self.array.now, "write", lba,
                                         block, page, "", 0))

    def _scramble_stream(self, lba: int) -> np.ndarray:
        seed = _lba_seed(lba)
        stream = self._scramble_cache.get(seed)
        if stream is None:
            stream = lfsr_stream(seed, self.lb_bits)
            self._scramble_cache[seed] = stream
        return stream

    def _encode(self, lba: int, payload: np.ndarray) -> np.ndarray:
        if self.config.scramble_enabled:
            payload = payload ^ self._scramble_stream(lba)
        full = np.concatenate([payload, crc_to_bits(crc_attach(payload))])
        k = self.config.codeword.k
        chunks = [full[i * k:(i + 1) * k]
                  for i in range(self.codewords_per_page)]
        if self._code is not None:
            words = [ldpc_encode(self._code, c) for c in chunks]
        else:
            words = [np.concatenate([c, self._hard_parity(c, i)])
                     for i, c in enumerate(chunks)]
        return np.concatenate(words)

    def _hard_parity(self, chunk: np.ndarray, idx: int) -> np.ndarray:
        # Stand-in parity bits: data-keyed hash stream so stored pages
        # carry no fixed pattern. The decode model never inspects them.
        n = self.config.codeword.l - self.config.codeword.k
        packed = np.packbits(chunk).tobytes()
        out = bytearray()
        counter = 0
        while len(out) * 8 < n:
            out += hashlib.blake2s(packed + bytes([idx & 0xFF, counter]),
                                   digest_size=32).digest()
            counter += 1
        return np.unpackbits(np.frombuffer(bytes(out), dtype=np.uint8))[:n]

    def _place_image(self, lba: int, image: np.ndarray, stream: str,
                     decode_ref: np.ndarray | None = None) -> tuple[int, int]:
        while True:
            state = self._ensure_open(stream)
            planes = state.sb.data_planes()
            plane = planes[state.pos]
            block = state.sb.members[plane]
            assert block is not None
            wl, bit = self._order[state.slot]
            page = wl * self.geometry.bits_per_cell + bit
            ok = self._program(block, wl, page, image, decode_ref)
            if not ok:
                self.mark_gbb(block)
                continue
            old = self.map.get(lba)
            if old is not None:
                self._unmap(*old)
            self.map[lba] = (block, page)
            self._page_lba[(block, page)] = lba
            self.array.set_page_valid(block, page, True)
            self._valid_count[block] = self._valid_count.get(block, 0) + 1
            if self.config.parity_enabled:
                q = self._plane_position(plane)
                acc = state.xor_acc.get(q)
                state.xor_acc[q] = (image.copy() if acc is None
                                    else acc ^ image)
            self._advance(state, stream)
            return block, page

    def _plane_position(self, plane: int) -> int:
        return plane % self.geometry.planes_per_die

    def _advance(self, state: _OpenState, stream: str) -> None:
        state.pos += 1
        if state.pos < len(state.sb.data_planes()):
            return
        self._close_slot(state)
        state.pos = 0
        state.slot += 1
        state.sb.slots_written = state.slot
        if state.slot >= self.geometry.pages_per_block:
            self._open[stream] = None

    def _close_slot(self, state: _OpenState) -> None:
        """Program the slot's parity pages from the accumulated XOR."""
        if not self.config.parity_enabled:
            return
        sb = state.sb
        wl, bit = self._order[state.slot]
        page = wl * self.geometry.bits_per_cell + bit
        for p in sb.parity_planes:
            block = sb.members[p]
            if block is None:
                continue
            q = self._plane_position(p)
            image = state.xor_acc.pop(q, None)
            if image is None:  # no live data member shares this position
                image = np.zeros(self.page_bits, dtype=np.uint8)
            if not self._program(block, wl, page, image):
                self.mark_gbb(block)
                continue
            self.array.set_page_valid(block, page, True)
            self.stats.parity_pages += 1

    def _program(self, block: int, wl: int, page: int, image: np.ndarray,
                 decode_ref: np.ndarray | None = None) -> bool:
        """Program one page; `decode_ref` overrides the codeword the
        decoder will aim for (internal copies keep the source's)."""
        if self.geometry.cell_mode == "slc":
            ok = self.array.program_wordline(block, wl, image[None, :],
                                             self.scheme)
        else:
            ok = self.array.program_wordline(block, wl, image, self.scheme)
        self._truth[(block, page)] = (np.packbits(image)
                                      if decode_ref is None else decode_ref)
        self.stats.nand_pages += 1
        return ok

    def _unmap(self, block: int, page: int) -> None:
        if self._page_lba.pop((block, page), None) is not None:
            self.array.set_page_valid(block, page, False)
            self._valid_count[block] = self._valid_count.get(block, 1) - 1

    def _valid_pages(self, block: int) -> list[int]:
        return [p for p in range(self.geometry.pages_per_block)
                if (block, p) in self._page_lba]

    # -------------------------------------------------------------- reads

    def host_read(self, lba: int) -> np.ndarray | None:
        """Run the staged correction flow; None means uncorrectable."""
        phys = self.map.get(lba)
        if phys is None:
            raise ValueError(f"lba {lba} was never written")
        block, page = phys
        img, stages = self._ladder(block, page)
        if img is None:
            self.stats.uncorrectable_reads += 1
            self._emit(lba, block, page, stages, 0)
            return None
        errors = (self._raw_error_count(block, page)
                  if self.config.trace_enabled else 0)
        payload = self._extract_payload(img, lba)
        if stages != [("hard", "ok")] and self.config.rewrite_on_recovery:
            self._place_image(lba, img, self._block_stream.get(block, "cold"))
            self.stats.recovery_rewrites += 1
        self._emit(lba, block, page, stages, errors)
        return payload

    def _extract_payload(self, image: np.ndarray, lba: int) -> np.ndarray:
        payload = self._page_data_bits(image)[:self.lb_bits]
        if self.config.scramble_enabled:
            payload = payload ^ self._scramble_stream(lba)
        return payload

    def _page_data_bits(self, image: np.ndarray) -> np.ndarray:
        l = self.config.codeword.l
        return np.concatenate([
            self._word_data_bits(image[i * l:(i + 1) * l])
            for i in range(self.codewords_per_page)])

    def _word_data_bits(self, word: np.ndarray) -> np.ndarray:
        if self._code is not None:
            return ldpc_extract_data(self._code, word)
        return word[:self.config.codeword.k]

    def _check_crc(self, image: np.ndarray) -> bool:
        data = self._page_data_bits(image)
        return crc_check(
            data[:self.lb_bits],
            crc_from_bits(data[self.lb_bits:self.lb_bits + CRC_BITS]))

    def _raw_error_count(self, block: int, page: int) -> int:
        """Diagnostic raw flip count against the decode target; the extra
        read stays out of the disturb budget."""
        truth = self._truth.get((block, page))
        if truth is None:
            return 0
        refs = self._block_refs.get(block)
        if refs is None:
            refs = birth_refs(self.array.threshold_model(
                self.array.block_mode(block)))
        raw = self.array.read_page(block, page, refs, count_read=False)
        stored = np.unpackbits(truth)[:raw.size]
        return int(np.count_nonzero(stored != raw))

    def _ladder(self, block: int, page: int
                ) -> tuple[np.ndarray | None, list[tuple[str, str]]]:
        """Correction ladder shared by host reads, refresh, and migration.

        Returns the corrected page image (all codeword bits) or None, plus
        the per-stage outcome list for the trace.
        """
        if self.config.ecc_mode == "ldpc":
            return self._ladder_ldpc(block, page)
        return self._ladder_hard(block, page)

    def _ladder_hard(self, block: int, page: int
                     ) -> tuple[np.ndarray | None, list[tuple[str, str]]]:
        stages: list[tuple[str, str]] = []
        refs = self._block_refs.get(block)
        if refs is None:
            refs = birth_refs(self.array.threshold_model(
                self.array.block_mode(block)))
        raw = self.array.read_page(block, page, refs)
        img = self._decode_hard(raw, block, page, check_crc=True)
        stages.append(("hard", "ok" if img is not None else "fail"))
        if img is not None:
            return img, stages
        for attempt in range(self.config.read_retries):
            better = self.refs_for(block)
            if tuple(better.refs) == tuple(refs.refs):
                break  # the optimization is deterministic; repeats match
            refs = better
            self._block_refs[block] = refs
            raw = self.array.read_page(block, page, refs)
            img = self._decode_hard(raw, block, page, check_crc=True)
            stages.append((f"retry{attempt + 1}",
                           "ok" if img is not None else "fail"))
            if img is not None:
                return img, stages
        if self.config.nac_enabled:
            res = nac_correct(
                self.array, block, page, refs, raw,
                lambda bits: self._decode_hard(bits, block, page,
                                               check_crc=True))
            stages.append(("nac", "ok" if res is not None else "fail"))
            if res is not None:
                return res.data, stages
        img = self._parity_stage(block, page, stages)
        return img, stages

    def _ladder_ldpc(self, block: int, page: int
                     ) -> tuple[np.ndarray | None, list[tuple[str, str]]]:
        stages: list[tuple[str, str]] = []
        refs = self.refs_for(block)
        raw = self.array.read_page(block, page, refs)
        img = self._decode_ldpc_hard(raw, check_crc=True)
        stages.append(("hard", "ok" if img is not None else "fail"))
        if img is not None:
            return img, stages
        for level in range(1, self.config.soft_levels + 1):
            img = self._decode_ldpc_soft(block, page, refs, level)
            stages.append((f"soft{level}",
                           "ok" if img is not None else "fail"))
            if img is not None:
                return img, stages
        img = self._parity_stage(block, page, stages)
        return img, stages

    def _parity_stage(self, block: int, page: int,
                      stages: list[tuple[str, str]]) -> np.ndarray | None:
        if not self.config.parity_enabled:
            return None
        img = self._parity_recover(block, page)
        if img is not None and not self._check_crc(img):
            img = None
        stages.append(("parity", "ok" if img is not None else "fail"))
        return img

    def _decode_hard(self, raw: np.ndarray, block: int, page: int, *,
                     check_crc: bool) -> np.ndarray | None:
        """Bounded-distance decode of every codeword, then the page
        checksum; miscorrected words surface here as checksum failures."""
        truth = self._truth.get((block, page))
        if truth is None:
            return None
        stored = np.unpackbits(truth)[:raw.size]
        spec = self.config.codeword
        out = np.empty_like(raw)
        for i in range(self.codewords_per_page):
            sl = slice(i * spec.l, (i + 1) * spec.l)
            res = hard_decode(raw[sl], stored[sl], spec, self._rng)
            if not res.ok:
                return None
            out[sl] = res.bits
        if check_crc and not self._check_crc(out):
            return None
        return out

    def _decode_ldpc_hard(self, raw: np.ndarray, *,
                          check_crc: bool) -> np.ndarray | None:
        assert self._code is not None
        llrs = (1.0 - 2.0 * raw.astype(np.float64)) * 8.0
        spec = self.config.codeword
        out = np.empty_like(raw)
        for i in range(self.codewords_per_page):
            sl = slice(i * spec.l, (i + 1) * spec.l)
            res = ldpc_decode(LlrWord(llrs[sl], 1), self._code)
            if not res.ok:
                return None
            out[sl] = res.bits
        if check_crc and not self._check_crc(out):
            return None
        return out

    def _decode_ldpc_soft(self, block: int, page: int, refs: ReadRefSet,
                          level: int) -> np.ndarray | None:
        assert self._code is not None
        wl, bit = self.array.page_address(block, page)
        bounds = self._soft_boundaries(block, wl, bit, refs)
        volts = self.array.effective_voltages(block, wl)
        word = soft_read(volts, bounds, level, self.config.soft_spacing)
        spec = self.config.codeword
        out = np.empty(self.page_bits, dtype=np.uint8)
        for i in range(self.codewords_per_page):
            sl = slice(i * spec.l, (i + 1) * spec.l)
            res = ldpc_decode(LlrWord(word.llrs[sl], level), self._code)
            if not res.ok:
                return None
            out[sl] = res.bits
        if not self._check_crc(out):
            return None
        return out

    def _soft_boundaries(self, block: int, wl: int, bit: int,
                         refs: ReadRefSet) -> list[BoundarySpec]:
        mode = self.array.block_mode(block)
        model = self.array.threshold_model(mode)
        cond = self.array.wl_condition(block, wl)
        bounds = []
        for ref, idx in zip(refs.for_bit(bit), MODE_BIT_REFS[mode][bit]):
            lo = composed_stats(model, idx, cond.pec,
                                cond.retention_seconds, cond.read_count)
            hi = composed_stats(model, idx + 1, cond.pec,
                                cond.retention_seconds, cond.read_count)
            states = np.array([idx, idx + 1], dtype=np.int16)
            lo_bit, hi_bit = bits_from_states(mode, states, bit)
            bounds.append(BoundarySpec(ref, lo.mean, lo.sigma,
                                       hi.mean, hi.sigma,
                                       bit_lo=int(lo_bit),
                                       bit_hi=int(hi_bit)))
        return bounds

    def _parity_recover(self, block: int, page: int) -> np.ndarray | None:
        """XOR the sibling pages of the parity group back together.

        Every sibling must decode in one first-stage read; one extra
        failure sinks the recovery.
        """
        if not self.config.parity_enabled:
            return None
        sb = self._owning_superblock(block)
        if not sb.parity_valid:
            return None
        slot = self._slot_of_page[page]
        if slot >= sb.slots_written:
            return None
        q = self._plane_position(self.geometry.plane_of_block(block))
        acc: np.ndarray | None = None
        for p, member in enumerate(sb.members):
            if self._plane_position(p) != q:
                continue
            if member == block:
                continue
            if member is None:
                return None
            img = self._stage1_image(member, page)
            if img is None:
                return None
            acc = img if acc is None else acc ^ img
        return acc

    def _stage1_image(self, block: int, page: int) -> np.ndarray | None:
        """Sibling read for parity recovery: first-stage decode only.

        Parity pages only look like codewords under a linear code, so the
        page checksum is not consulted here; the caller checks the final
        reconstruction instead.
        """
        refs = self.refs_for(block)
        raw = self.array.read_page(block, page, refs)
        if self._code is not None:
            return self._decode_ldpc_hard(raw, check_crc=False)
        return self._decode_hard(raw, block, page, check_crc=False)

    def _emit(self, lba: int, block: int, page: int,
              stages: list[tuple[str, str]], errors: int) -> None:
        if not self.config.trace_enabled:
            return
        joined = ";".join(f"{name}={outcome}" for name, outcome in stages)
        self.trace.append(TraceEvent(self.array.now, "read", lba, block,
                                     page, joined, errors))

    # ----------------------------------------------------------------- GC

    def garbage_collect(self) -> int:
        """Reclaim the most fragmented closed superblock; returns pages
        moved."""
        open_sids = {st.sb.sid for st in self._open.values()
                     if st is not None}
        best: _Superblock | None = None
        best_valid = 0
        for sb in self._superblocks:
            alive = sb.alive()
            if not alive or sb.sid in open_sids:
                continue
            if all(b in self._free_blocks for b in alive):
                continue
            valid = sum(self._valid_count.get(b, 0) for b in alive)
            if best is None or (valid, sb.sid) < (best_valid, best.sid):
                best, best_valid = sb, valid
        if best is None:
            raise DeviceFullError("nothing to collect")
        capacity = len(best.data_planes()) * self.geometry.pages_per_block
        if best_valid >= capacity:
            raise DeviceFullError("all pages hold live data")
        if best_valid > self._placement_slack():
            # Migrations must never dead-end with pages in flight.
            raise DeviceFullError("no room to migrate live data")
        was_relocating = self._relocating
        self._relocating = True
        try:
            moved = 0
            for member in best.alive():
                if member in self._free_blocks:
                    continue
                for page in self._valid_pages(member):
                    self._migrate_page(member, page)
                    moved += 1
                self._erase_into_pool(member)
        finally:
            self._relocating = was_relocating
        best.parity_valid = True
        best.slots_written = 0
        self.stats.gc_runs += 1
        self.stats.gc_migrated += moved
        return moved

    def _migrate_page(self, block: int, page: int) -> None:
        lba = self._page_lba[(block, page)]
        stream = self._block_stream.get(block, "cold")
        decode_ref = None
        if self.config.gc_copyback:
            # Internal copy without decoding: latent errors travel along,
            # but the decoder still aims for the original codeword.
            refs = self._block_refs.get(block)
            if refs is None:
                refs = birth_refs(self.array.threshold_model(
                    self.array.block_mode(block)))
            image = self.array.read_page(block, page, refs)
            decode_ref = self._truth.get((block, page))
        else:
            image, _ = self._ladder(block, page)
            if image is None:
                # Nothing better than the raw bits exists any more.
                image = self.array.read_page(block, page,
                                             self.refs_for(block))
                decode_ref = self._truth.get((block, page))
                self.stats.data_lost_pages += 1
        self._unmap(block, page)
        self._place_image(lba, image, stream, decode_ref)

    def _erase_into_pool(self, block: int) -> None:
        for page in range(self.geometry.pages_per_block):
            self._truth.pop((block, page), None)
        if self.array.erase_block(block):
            self.stats.blocks_erased += 1
            self._free_blocks.add(block)
            self._block_refs.pop(block, None)
        else:
            self.mark_gbb(block)

    # ------------------------------------------------------- refresh host

    def closed_blocks(self) -> Iterable[int]:
        open_blocks = {b for st in self._open.values() if st is not None
                       for b in st.sb.alive()}
        return sorted(b for b, n in self._valid_count.items()
                      if n > 0 and b not in open_blocks
                      and not self.array.is_bad(b))

    def refs_for(self, block: int) -> ReadRefSet:
        mode = self.array.block_mode(block)
        return optimal_read_refs(self.array.threshold_model(mode),
                                 self.array.wl_condition(block, 0))

    def read_corrected(self, block: int, page: int) -> np.ndarray | None:
        img, _ = self._ladder(block, page)
        return img

    def migrate_block(self, block: int) -> None:
        """Move one block's live pages out (refresh remap); siblings keep
        their data but the group loses parity coverage until reclaimed."""
        sb = self._owning_superblock(block)
        stream = self._block_stream.get(block, "cold")
        for st, open_state in list(self._open.items()):
            if open_state is not None and open_state.sb.sid == sb.sid:
                self._open[st] = None
        before = self.stats.nand_pages
        for page in self._valid_pages(block):
            lba = self._page_lba[(block, page)]
            img, _ = self._ladder(block, page)
            self._unmap(block, page)
            if img is None:
                self.stats.data_lost_pages += 1
                self.map.pop(lba, None)
                continue
            self._place_image(lba, img, stream)
        self.stats.refresh_pages += self.stats.nand_pages - before
        self._erase_into_pool(block)
        sb.parity_valid = False

    def is_hot_block(self, block: int) -> bool:
        return self._block_stream.get(block) == "hot"
