"""Drive-level behavior: mapping, scrambling, parity groups, garbage
collection, bad-block handling, and the staged correction ladder."""

from dataclasses import replace

import numpy as np
import pytest

from flashrel.controller import (
    Controller,
    ControllerConfig,
    DeviceFullError,
    LFSR_PERIOD,
    ReservedExhaustedError,
    descramble,
    lfsr_stream,
    parity_analytics,
    scramble,
)
from flashrel.ecc import CodewordSpec
from flashrel.mitigation import RefreshPolicy, refresh_tick, shadow_page_order
from flashrel.nand_array import CellArray, Geometry, Mechanisms

# Error mechanisms silenced: mapping and bookkeeping assertions want every
# read to come back exactly as programmed.
QUIET = Mechanisms(retention=False, read_disturb=False, interference=False,
                   program_errors=False, pass_through=False)

CW = CodewordSpec(l=1024, k=896, capability_t=40)
DAY = 86400.0


def desk(mode="mlc", blocks=16, wordlines=8, cells=2048, dies=1, planes=1):
    return Geometry(channels=1, chips_per_channel=dies, dies_per_chip=1,
                    planes_per_die=planes, blocks_per_plane=blocks,
                    wordlines_per_block=wordlines, cells_per_wordline=cells,
                    cell_mode=mode)


def make(geometry=None, config=None, *, seed=7, mechanisms=QUIET,
         array_seed=3):
    arr = CellArray(geometry or desk(), seed=array_seed,
                    mechanisms=mechanisms)
    ctl = Controller(arr, config or ControllerConfig(codeword=CW), seed=seed)
    return arr, ctl


def payload(ctl, rng):
    return rng.integers(0, 2, ctl.lb_bits).astype(np.uint8)


def fill_random(ctl, rng, n, lba_range=None):
    hi = lba_range or ctl.capacity_lbas
    store = {}
    for _ in range(n):
        lba = int(rng.integers(0, hi))
        data = payload(ctl, rng)
        ctl.host_write(lba, data)
        store[lba] = data
    return store


def assert_reads_back(ctl, store):
    for lba, data in store.items():
        got = ctl.host_read(lba)
        assert got is not None, f"lba {lba} uncorrectable"
        assert np.array_equal(got, data), f"lba {lba} corrupted"


# ------------------------------------------------------------- scrambling


def test_scramble_round_trip_many_addresses():
    rng = np.random.default_rng(0)
    for lba in rng.integers(0, 1 << 30, size=1000):
        data = rng.integers(0, 2, 512).astype(np.uint8)
        back = descramble(scramble(data, int(lba)), int(lba))
        assert np.array_equal(back, data)


def test_scramble_balances_constant_data():
    # A pathological all-zeros page must leave the scrambler looking random.
    for lba in (0, 1, 77, 65534, 123456789):
        out = scramble(np.zeros(4096 * 8, dtype=np.uint8), lba)
        ones = out.mean()
        assert 0.48 <= ones <= 0.52, f"lba {lba}: ones fraction {ones}"


def test_scramble_depends_on_address():
    data = np.zeros(1024, dtype=np.uint8)
    a = scramble(data, 10)
    b = scramble(data, 11)
    assert not np.array_equal(a, b)


def test_scramble_period_wraps_without_zero_state():
    # Address lba and lba + period share a stream; the all-zeros register
    # never occurs because the seed is offset by one.
    data = np.zeros(256, dtype=np.uint8)
    assert np.array_equal(scramble(data, 5),
                          scramble(data, 5 + LFSR_PERIOD))
    with pytest.raises(ValueError):
        lfsr_stream(0, 16)


def test_lfsr_full_period():
    seen = set()
    state_stream = lfsr_stream(1, 17 * LFSR_PERIOD)
    # Fold the bit stream into 17-bit windows; a maximal register repeats
    # its output exactly every 65535 bits.
    assert np.array_equal(state_stream[:LFSR_PERIOD],
                          state_stream[LFSR_PERIOD:2 * LFSR_PERIOD])
    assert not np.array_equal(state_stream[:100], state_stream[1:101])
    del seen


# -------------------------------------------------------- failure algebra


def test_parity_analytics_zero_rates():
    assert parity_analytics(0.0, 0.0, 8, 4, 8) == (0.0, 0.0)


def test_parity_analytics_pinned_lb_failure():
    p_lb, _ = parity_analytics(1e-4, 1e-3, 8, 4, 8)
    assert p_lb == pytest.approx(0.0080713, rel=1e-4)


def test_parity_analytics_pinned_group_failure():
    # One codeword per logical block at the rate that makes the LB failure
    # probability exactly 0.008, in a 4 x 8 group.
    p_lb, p_group = parity_analytics(0.0, 0.008, 1, 4, 8)
    assert p_lb == pytest.approx(0.008)
    assert p_group == pytest.approx(1.7635e-3, rel=1e-3)


def test_parity_analytics_validation():
    with pytest.raises(ValueError):
        parity_analytics(-0.1, 0.0, 1, 4, 8)
    with pytest.raises(ValueError):
        parity_analytics(0.0, 1.5, 1, 4, 8)
    with pytest.raises(ValueError):
        parity_analytics(0.0, 0.0, 0, 4, 8)


def test_parity_group_failure_matches_simulation():
    # Direct Bernoulli simulation of a 32-LB stripe: the target fails and
    # at least one sibling fails too.
    q = 0.008
    rng = np.random.default_rng(3)
    trials = 1_000_000
    fails = rng.random((trials, 32)) < q
    target = fails[:, 0]
    sibling = fails[:, 1:].any(axis=1)
    observed = np.mean(target & sibling)
    _, predicted = parity_analytics(0.0, q, 1, 4, 8)
    assert observed == pytest.approx(predicted, rel=0.15)


# ------------------------------------------------------------ write, read


def test_write_then_read_identity():
    rng = np.random.default_rng(1)
    _, ctl = make()
    store = fill_random(ctl, rng, 60)
    assert_reads_back(ctl, store)
    assert ctl.stats.uncorrectable_reads == 0


def test_read_before_write_raises():
    _, ctl = make()
    with pytest.raises(ValueError):
        ctl.host_read(0)


def test_payload_shape_enforced():
    _, ctl = make()
    with pytest.raises(ValueError):
        ctl.host_write(0, np.zeros(ctl.lb_bits - 1, dtype=np.uint8))


def test_lba_range_enforced():
    rng = np.random.default_rng(2)
    _, ctl = make()
    with pytest.raises(ValueError):
        ctl.host_write(ctl.capacity_lbas, payload(ctl, rng))


def test_page_must_hold_whole_codewords():
    arr = CellArray(desk(cells=2000), seed=1, mechanisms=QUIET)
    with pytest.raises(ValueError):
        Controller(arr, ControllerConfig(codeword=CW))


def test_parity_needs_two_dies():
    arr = CellArray(desk(dies=1), seed=1, mechanisms=QUIET)
    with pytest.raises(ValueError):
        Controller(arr, ControllerConfig(codeword=CW, parity_enabled=True))


def test_overwrite_leaves_one_valid_copy():
    rng = np.random.default_rng(3)
    arr, ctl = make()
    first = payload(ctl, rng)
    second = payload(ctl, rng)
    ctl.host_write(9, first)
    old_block, old_page = ctl.map[9]
    ctl.host_write(9, second)
    new_block, new_page = ctl.map[9]
    assert (old_block, old_page) != (new_block, new_page)
    assert arr.block_state(old_block).page_valid[old_page] == 0
    assert arr.block_state(new_block).page_valid[new_page] == 1
    assert np.array_equal(ctl.host_read(9), second)


def test_programming_follows_shadow_order(monkeypatch):
    rng = np.random.default_rng(4)
    geometry = desk(wordlines=4)
    arr, ctl = make(geometry)
    calls = []
    original = Controller._program

    def recording(self, block, wl, page, image, decode_ref=None):
        calls.append((block, wl, page))
        return original(self, block, wl, page, image, decode_ref)

    monkeypatch.setattr(Controller, "_program", recording)
    for i in range(geometry.pages_per_block + 3):
        ctl.host_write(i, payload(ctl, rng))
    first_block = calls[0][0]
    seq = [(wl, page - wl * geometry.bits_per_cell)
           for block, wl, page in calls if block == first_block]
    order = shadow_page_order(geometry.wordlines_per_block, "mlc")
    assert tuple(seq) == order[:len(seq)]
    assert len(seq) == geometry.pages_per_block


def test_sequential_fill_has_unit_write_amplification():
    rng = np.random.default_rng(5)
    _, ctl = make()
    for lba in range(ctl.capacity_lbas):
        ctl.host_write(lba, payload(ctl, rng))
    assert ctl.stats.write_amplification == 1.0
    assert ctl.stats.gc_runs == 0


def test_write_amplification_never_below_one():
    rng = np.random.default_rng(6)
    _, ctl = make()
    fill_random(ctl, rng, 500)
    assert ctl.stats.write_amplification >= 1.0


# -------------------------------------------------------------- allocation


def test_select_free_block_prefers_low_wear():
    arr, ctl = make()
    for block in ctl._free_blocks:
        arr.wear_to(block, 50)
    arr.wear_to(4, 7)
    arr.wear_to(11, 3)
    assert ctl.select_free_block() == 11


def test_select_free_block_breaks_ties_low():
    arr, ctl = make()
    assert ctl.select_free_block() == 0


def test_select_free_block_reclaims_when_empty():
    rng = np.random.default_rng(7)
    _, ctl = make(desk(blocks=8, wordlines=4),
                  ControllerConfig(codeword=CW, gc_watermark=1))
    for lba in range(40):
        ctl.host_write(lba, payload(ctl, rng))
    # Kill the first block's contents, then let the allocator consume the
    # last erased group so the free list is really empty.
    for lba in range(8):
        ctl.host_write(lba, payload(ctl, rng))
    ctl._open["hot"] = ctl._open_superblock("hot")
    assert not ctl._free_blocks
    before = ctl.stats.gc_runs
    block = ctl.select_free_block()
    assert ctl.stats.gc_runs == before + 1
    assert block in ctl._free_blocks


def test_wear_leveling_beats_round_robin_spread():
    # Simulation comparison: cycling-aware selection keeps the worst-case
    # wear gap within one cycle of blind rotation under skewed overwrites.
    def spread(selection):
        rng = np.random.default_rng(8)
        _, ctl = make(desk(blocks=8, wordlines=4),
                      ControllerConfig(codeword=CW,
                                       free_selection=selection))
        hot = max(2, ctl.capacity_lbas // 8)
        for _ in range(900):
            lba = int(rng.integers(0, hot))
            ctl.host_write(lba, payload(ctl, rng))
        pecs = [ctl.array.block_state(b).pec
                for b in range(ctl._general_sids)]
        return max(pecs) - min(pecs)

    assert spread("wear_min") <= spread("round_robin") + 1


# --------------------------------------------------------------------- GC


def test_gc_empty_victim_moves_nothing():
    rng = np.random.default_rng(9)
    geometry = desk(blocks=8, wordlines=4)
    arr, ctl = make(geometry)
    # Fill one block, then overwrite everything so it holds no live data.
    n = geometry.pages_per_block
    for lba in range(n):
        ctl.host_write(lba, payload(ctl, rng))
    for lba in range(n):
        ctl.host_write(lba, payload(ctl, rng))
    erased = ctl.stats.blocks_erased
    moved = ctl.garbage_collect()
    assert moved == 0
    assert ctl.stats.blocks_erased == erased + 1


def test_gc_victim_ties_break_low():
    rng = np.random.default_rng(10)
    geometry = desk(blocks=8, wordlines=4)
    arr, ctl = make(geometry)
    n = geometry.pages_per_block
    # Two dead blocks: both fully overwritten.
    for lba in range(2 * n):
        ctl.host_write(lba, payload(ctl, rng))
    for lba in range(2 * n):
        ctl.host_write(lba, payload(ctl, rng))
    dead = sorted(b for b in range(8)
                  if arr.block_state(b).page_valid.sum() == 0
                  and arr.block_state(b).closed)
    assert len(dead) >= 2
    ctl.garbage_collect()
    assert arr.block_state(dead[0]).pec == 1
    assert arr.block_state(dead[1]).pec == 0


def test_write_amplification_falls_with_spare_area():
    def wa(op):
        rng = np.random.default_rng(11)
        _, ctl = make(desk(blocks=16, wordlines=4),
                      ControllerConfig(codeword=CW, op_fraction=op))
        for lba in range(ctl.capacity_lbas):
            ctl.host_write(lba, payload(ctl, rng))
        for _ in range(4 * ctl.capacity_lbas):
            lba = int(rng.integers(0, ctl.capacity_lbas))
            ctl.host_write(lba, payload(ctl, rng))
        return ctl.stats.write_amplification

    w10, w20, w30 = wa(0.10), wa(0.20), wa(0.30)
    assert w10 > w20 > w30 >= 1.0


def test_device_full_without_spare_area():
    rng = np.random.default_rng(12)
    _, ctl = make(desk(blocks=8, wordlines=4),
                  ControllerConfig(codeword=CW, op_fraction=0.0,
                                   reserved_fraction=0.0))
    for lba in range(ctl.capacity_lbas):
        ctl.host_write(lba, payload(ctl, rng))
    with pytest.raises(DeviceFullError):
        ctl.host_write(0, payload(ctl, rng))


def test_gc_copyback_carries_raw_bits():
    # Internal copies skip the decoder, so disturb flips travel into the
    # new location; a decoding migration scrubs them. Either way the data
    # stays within capability and reads back.
    def residue(copyback):
        rng = np.random.default_rng(13)
        mech = Mechanisms(interference=False, program_errors=False,
                          pass_through=False)
        arr, ctl = make(desk("tlc", blocks=8, wordlines=4),
                        ControllerConfig(codeword=CW, gc_copyback=copyback),
                        mechanisms=mech, array_seed=21)
        store = {}
        for lba in range(14):
            data = payload(ctl, rng)
            ctl.host_write(lba, data)
            store[lba] = data
        for lba in range(4):
            data = payload(ctl, rng)
            ctl.host_write(lba, data)
            store[lba] = data
        arr.advance_time(180 * DAY)
        for block in {b for b, _ in ctl.map.values()}:
            arr.record_disturb(block, 30_000)
        ctl.garbage_collect()
        assert ctl.stats.gc_migrated > 0
        assert_reads_back(ctl, store)
        return sum(ctl._raw_error_count(*ctl.map[lba]) for lba in store)

    assert residue(copyback=True) > residue(copyback=False)


# --------------------------------------------------------- factory scan


def test_factory_scan_marks_and_remaps():
    arr = CellArray(desk(blocks=16, dies=2), seed=5, mechanisms=QUIET)
    cfg = ControllerConfig(codeword=CW, reserved_fraction=0.25,
                           obb_fraction=0.125)
    ctl = Controller(arr, cfg, seed=1)
    per_plane = round(ctl._general_sids * 0.125)
    assert len(ctl.obb_blocks) == per_plane * arr.geometry.planes
    for block in ctl.obb_blocks:
        assert arr.is_bad(block)
    # Every superblock member is usable and in the plane it stands for.
    for sb in ctl._superblocks:
        for plane, member in enumerate(sb.members):
            assert member is not None
            assert not arr.is_bad(member)
            assert arr.geometry.plane_of_block(member) == plane


def test_factory_scan_fraction_capped_by_reserve():
    with pytest.raises(ValueError):
        ControllerConfig(codeword=CW, reserved_fraction=0.02,
                         obb_fraction=0.05)


def test_factory_scan_runs_once():
    _, ctl = make()
    with pytest.raises(RuntimeError):
        ctl.obb_scan()


# ----------------------------------------------------- grown bad blocks


def fail_next_programs(monkeypatch, n):
    state = {"left": n}
    original = CellArray.program_wordline

    def failing(self, block, wl, data, scheme=None):
        ok = original(self, block, wl, data, scheme)
        if state["left"] > 0:
            state["left"] -= 1
            return False
        return ok

    monkeypatch.setattr(CellArray, "program_wordline", failing)
    return state


def test_program_failure_retires_block_and_keeps_data(monkeypatch):
    rng = np.random.default_rng(14)
    arr, ctl = make(desk(blocks=8, wordlines=4, dies=2),
                    ControllerConfig(codeword=CW, parity_enabled=True,
                                     reserved_fraction=0.25))
    store = fill_random(ctl, rng, 10, lba_range=ctl.capacity_lbas)
    fail_next_programs(monkeypatch, 1)
    data = payload(ctl, rng)
    ctl.host_write(0, data)
    store[0] = data
    assert len(ctl.gbb_blocks) == 1
    bad = next(iter(ctl.gbb_blocks))
    assert arr.is_bad(bad)
    assert_reads_back(ctl, store)
    # The superblock got a same-plane replacement out of the reserve.
    sb = next(s for s in ctl._superblocks if bad not in s.members)
    plane = arr.geometry.plane_of_block(bad)
    owner = [s for s in ctl._superblocks
             if s.sid == bad % arr.geometry.blocks_per_plane]
    assert owner[0].members[plane] is not None
    del sb


def test_erase_failure_retires_block():
    rng = np.random.default_rng(15)
    geometry = desk(blocks=8, wordlines=4)
    arr, ctl = make(geometry, ControllerConfig(codeword=CW,
                                               reserved_fraction=0.25))
    n = geometry.pages_per_block
    for lba in range(n):
        ctl.host_write(lba, payload(ctl, rng))
    for lba in range(n):
        ctl.host_write(lba, payload(ctl, rng))
    arr.params = replace(arr.params, p_erase_fail=1.0)
    ctl.garbage_collect()
    arr.params = replace(arr.params, p_erase_fail=0.0)
    assert len(ctl.gbb_blocks) == 1


def test_reserve_exhaustion_is_device_failure(monkeypatch):
    rng = np.random.default_rng(16)
    _, ctl = make(desk(blocks=8, wordlines=4),
                  ControllerConfig(codeword=CW, reserved_fraction=0.2))
    fail_next_programs(monkeypatch, 100)
    with pytest.raises(ReservedExhaustedError):
        for lba in range(4):
            ctl.host_write(lba, payload(ctl, rng))


# ------------------------------------------------------- parity recovery


def parity_setup(rng, *, wordlines=4, retries=0, nac=False, t=4):
    geometry = desk(blocks=8, wordlines=wordlines, dies=2)
    spec = CodewordSpec(l=1024, k=896, capability_t=t)
    cfg = ControllerConfig(codeword=spec, parity_enabled=True,
                           read_retries=retries, nac_enabled=nac,
                           trace_enabled=True)
    arr = CellArray(geometry, seed=11, mechanisms=QUIET)
    ctl = Controller(arr, cfg, seed=2)
    store = {}
    for lba in range(geometry.pages_per_block):
        data = payload(ctl, rng)
        ctl.host_write(lba, data)
        store[lba] = data
    return arr, ctl, store


def corrupt_page(arr, ctl, block, page, n_cells):
    """Push cells of one wordline up a state so the page misreads."""
    wl, _ = arr.page_address(block, page)
    states = arr.block_state(block)
    del states
    truth = np.unpackbits(ctl._truth[(block, page)])[:ctl.page_bits]
    mode = arr.geometry.cell_mode
    current = arr._blocks[block].state[wl].copy()
    bumped = current.copy()
    movable = np.flatnonzero(current < (1 << arr.geometry.bits_per_cell) - 1)
    chosen = movable[:n_cells]
    bumped[chosen] = current[chosen] + 1
    arr.reprogram_in_place(block, wl, bumped)
    del truth, mode


def test_parity_recovers_unreadable_page():
    rng = np.random.default_rng(17)
    arr, ctl, store = parity_setup(rng)
    lba = 0
    block, page = ctl.map[lba]
    corrupt_page(arr, ctl, block, page, 200)
    got = ctl.host_read(lba)
    assert got is not None
    assert np.array_equal(got, store[lba])
    stages = ctl.trace[-1].stages
    assert "hard=fail" in stages
    assert "parity=ok" in stages
    assert ctl.stats.recovery_rewrites == 1
    # The rewritten copy reads clean again.
    got = ctl.host_read(lba)
    assert np.array_equal(got, store[lba])
    assert "parity" not in ctl.trace[-1].stages


def test_parity_xor_identity_over_group():
    rng = np.random.default_rng(18)
    arr, ctl, store = parity_setup(rng)
    sb = ctl._superblocks[0]
    data_planes = sb.data_planes()
    parity_plane = sb.parity_planes[0]
    parity_block = sb.members[parity_plane]
    for page in range(arr.geometry.pages_per_block):
        acc = np.zeros(ctl.page_bits, dtype=np.uint8)
        for p in data_planes:
            member = sb.members[p]
            if (member, page) not in ctl._truth:
                break
        else:
            for p in data_planes:
                member = sb.members[p]
                acc ^= np.unpackbits(
                    ctl._truth[(member, page)])[:ctl.page_bits]
            stored = np.unpackbits(
                ctl._truth[(parity_block, page)])[:ctl.page_bits]
            assert np.array_equal(acc, stored)


def test_recovery_fails_when_two_members_break():
    rng = np.random.default_rng(19)
    arr, ctl, store = parity_setup(rng)
    lba = 0
    block, page = ctl.map[lba]
    sb = ctl._owning_superblock(block)
    sibling = next(m for m in sb.alive() if m != block)
    corrupt_page(arr, ctl, block, page, 200)
    corrupt_page(arr, ctl, sibling, page, 200)
    assert ctl.host_read(lba) is None
    assert ctl.stats.uncorrectable_reads == 1
    assert "parity=fail" in ctl.trace[-1].stages


def test_ladder_stage_order_hard_mode():
    rng = np.random.default_rng(20)
    arr, ctl, store = parity_setup(rng, retries=2, nac=True)
    lba = 1
    block, page = ctl.map[lba]
    corrupt_page(arr, ctl, block, page, 200)
    ctl.host_read(lba)
    names = [part.split("=")[0] for part in ctl.trace[-1].stages.split(";")]
    assert names[0] == "hard"
    assert names[-1] == "parity"
    assert "nac" in names


def test_clean_read_stops_at_first_stage():
    rng = np.random.default_rng(21)
    arr, ctl, store = parity_setup(rng)
    ctl.host_read(2)
    assert ctl.trace[-1].stages == "hard=ok"
    assert ctl.stats.recovery_rewrites == 0


# ------------------------------------------------------ checksum backstop


def test_checksum_rejects_miscorrected_words():
    # A decoder that always claims success on overload must never hand
    # wrong data to the host.
    rng = np.random.default_rng(22)
    geometry = desk(blocks=8, wordlines=4)
    spec = CodewordSpec(l=1024, k=896, capability_t=2,
                        miscorrection_prob=1.0)
    arr = CellArray(geometry, seed=13, mechanisms=QUIET)
    ctl = Controller(arr, ControllerConfig(codeword=spec, read_retries=0,
                                           nac_enabled=False), seed=3)
    for lba in range(geometry.pages_per_block):
        ctl.host_write(lba, payload(ctl, rng))
    block, page = ctl.map[0]
    corrupt_page(arr, ctl, block, page, 150)
    assert ctl.host_read(0) is None
    assert ctl.stats.uncorrectable_reads == 1


# ------------------------------------------------------------- soft decode


def test_soft_ladder_recovers_after_hard_failure():
    # Heavily disturbed and aged pages overwhelm the one-shot hard read;
    # the graded soft stages still bring every page home.
    rng = np.random.default_rng(23)
    geometry = desk("tlc", blocks=8, wordlines=4)
    spec = CodewordSpec(l=1024, k=896, capability_t=0)
    mech = Mechanisms(interference=False, program_errors=False,
                      pass_through=False)
    arr = CellArray(geometry, seed=15, mechanisms=mech)
    for block in range(8):
        arr.wear_to(block, 3000)
    ctl = Controller(arr, ControllerConfig(codeword=spec, ecc_mode="ldpc",
                                           soft_levels=3,
                                           trace_enabled=True), seed=4)
    store = {}
    for lba in range(12):
        data = payload(ctl, rng)
        ctl.host_write(lba, data)
        store[lba] = data
    arr.advance_time(365 * DAY)
    for block in {b for b, _ in ctl.map.values()}:
        arr.record_disturb(block, 30_000)
    soft_used = 0
    for lba, data in store.items():
        got = ctl.host_read(lba)
        assert got is not None
        assert np.array_equal(got, data)
        if "soft" in ctl.trace[-1].stages:
            soft_used += 1
    assert soft_used > 0
    assert ctl.stats.recovery_rewrites == soft_used


# ----------------------------------------------------------- refresh host


def test_refresh_protocol_remaps_and_preserves_data():
    rng = np.random.default_rng(24)
    mech = Mechanisms(interference=False, program_errors=False,
                      pass_through=False)
    arr, ctl = make(desk(blocks=8, wordlines=4), mechanisms=mech)
    store = fill_random(ctl, rng, 20, lba_range=16)
    arr.advance_time(90 * DAY)
    report = refresh_tick(ctl, RefreshPolicy(kind="remap",
                                             base_interval_s=DAY))
    assert report.checked > 0
    assert report.remapped
    assert ctl.stats.refresh_pages > 0
    assert_reads_back(ctl, store)


def test_refresh_skips_open_and_hot_blocks():
    rng = np.random.default_rng(25)
    _, ctl = make(desk(blocks=8, wordlines=4),
                  ControllerConfig(codeword=CW, warm_enabled=True,
                                   warm_window=64, warm_k=2))
    for _ in range(30):
        ctl.host_write(3, payload(ctl, rng))  # same address: hot
    open_blocks = {b for st in ctl._open.values() if st is not None
                   for b in st.sb.alive()}
    for b in ctl.closed_blocks():
        assert b not in open_blocks


def test_hot_data_lands_in_hot_blocks():
    rng = np.random.default_rng(26)
    _, ctl = make(desk(blocks=16, wordlines=4),
                  ControllerConfig(codeword=CW, warm_enabled=True,
                                   warm_window=256, warm_k=3))
    cold_lbas = list(range(20, 40))
    for lba in cold_lbas:
        ctl.host_write(lba, payload(ctl, rng))
    for _ in range(40):
        ctl.host_write(1, payload(ctl, rng))
    hot_block = ctl.map[1][0]
    cold_block = ctl.map[30][0]
    assert ctl.is_hot_block(hot_block)
    assert not ctl.is_hot_block(cold_block)


# ----------------------------------------------------------- data integrity


def test_random_workload_integrity_under_collection():
    rng = np.random.default_rng(27)
    _, ctl = make(desk(blocks=12, wordlines=4))
    shadow = {}
    for step in range(2500):
        if shadow and rng.random() < 0.35:
            lba = int(rng.choice(list(shadow)))
            got = ctl.host_read(lba)
            assert got is not None
            assert np.array_equal(got, shadow[lba]), f"step {step}"
        else:
            lba = int(rng.integers(0, ctl.capacity_lbas))
            data = payload(ctl, rng)
            ctl.host_write(lba, data)
            shadow[lba] = data
    assert ctl.stats.gc_runs > 0
    assert ctl.stats.uncorrectable_reads == 0
    assert_reads_back(ctl, shadow)


def test_trace_records_reads_and_writes():
    rng = np.random.default_rng(28)
    _, ctl = make(config=ControllerConfig(codeword=CW, trace_enabled=True))
    ctl.host_write(5, payload(ctl, rng))
    ctl.host_read(5)
    write, read = ctl.trace[-2], ctl.trace[-1]
    assert write.op == "write"
    assert write.lba == 5
    assert write.stages == ""
    assert read.op == "read"
    assert read.lba == 5
    assert (read.block, read.page) == (write.block, write.page)
    assert read.stages == "hard=ok"
    assert read.errors == 0
