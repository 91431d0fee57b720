"""ECC stack tests: analytic failure rate, hard-decode model, CRC, LLR math,
soft binning, and the LDPC encoder/decoder."""

from fractions import Fraction
from math import comb

import numpy as np
import pytest
from scipy.stats import binom

from flashrel.ecc import (
    BoundarySpec,
    CodewordSpec,
    LlrWord,
    build_ldpc,
    compute_llr,
    crc_attach,
    crc_check,
    crc_from_bits,
    crc_to_bits,
    hard_decode,
    ldpc_decode,
    ldpc_encode,
    ldpc_extract_data,
    ldpc_syndrome_ok,
    p_ecfr,
    soft_offsets,
    soft_read,
)

# --------------------------------------------------------------------- p_ecfr


def _p_ecfr_exact(l, t, ber_frac):
    total = Fraction(0)
    for j in range(t + 1, l + 1):
        total += comb(l, j) * ber_frac**j * (1 - ber_frac) ** (l - j)
    return float(total)


def test_p_ecfr_small_case_matches_exact_rational_oracle():
    got = p_ecfr(10, 1, 0.1)
    assert got == pytest.approx(_p_ecfr_exact(10, 1, Fraction(1, 10)), rel=1e-12)
    assert got == pytest.approx(0.263901, abs=5e-7)


def test_p_ecfr_trivial_edges():
    assert p_ecfr(10, 10, 0.3) == 0.0
    assert p_ecfr(10, 1, 0.0) == 0.0
    assert p_ecfr(10, 1, 1.0) == 1.0


def test_p_ecfr_matches_survival_function_at_scale():
    for l, t, ber in [(1024, 8, 0.005), (1024, 16, 0.01), (2048, 40, 0.001)]:
        assert p_ecfr(l, t, ber) == pytest.approx(
            float(binom.sf(t, l, ber)), rel=1e-9)


def test_p_ecfr_monotone_in_ber_and_t():
    bers = [0.001, 0.002, 0.005, 0.01, 0.02]
    vals = [p_ecfr(1024, 12, b) for b in bers]
    assert vals == sorted(vals)
    ts = [4, 8, 12, 16, 24]
    vals = [p_ecfr(1024, t, 0.005) for t in ts]
    assert vals == sorted(vals, reverse=True)


def test_p_ecfr_deep_tail_stays_positive_and_tiny():
    p = p_ecfr(1024, 100, 0.001)
    assert 0 < p < 1e-100


def test_p_ecfr_rejects_bad_arguments():
    with pytest.raises(ValueError):
        p_ecfr(10, 11, 0.1)
    with pytest.raises(ValueError):
        p_ecfr(10, 1, 1.5)


# ---------------------------------------------------------------- hard decode


def _spec(l=256, t=4, mis=0.0):
    return CodewordSpec(l=l, k=l - 32, capability_t=t, miscorrection_prob=mis)


def test_hard_decode_success_up_to_capability():
    spec = _spec()
    rng = np.random.default_rng(3)
    truth = rng.integers(0, 2, spec.l).astype(np.uint8)
    raw = truth.copy()
    flips = rng.choice(spec.l, size=spec.capability_t, replace=False)
    raw[flips] ^= 1
    res = hard_decode(raw, truth, spec)
    assert res.ok and res.error_count == spec.capability_t
    assert np.array_equal(res.bits, truth)


def test_hard_decode_failure_one_past_capability():
    spec = _spec()
    truth = np.zeros(spec.l, dtype=np.uint8)
    raw = truth.copy()
    raw[: spec.capability_t + 1] = 1
    res = hard_decode(raw, truth, spec)
    assert not res.ok and res.error_count == spec.capability_t + 1
    assert np.array_equal(res.bits, raw)


def test_hard_decode_failure_rate_tracks_analytic_rate():
    spec = _spec(l=256, t=4)
    ber = 0.02
    rng = np.random.default_rng(11)
    trials = 20_000
    truth = np.zeros(spec.l, dtype=np.uint8)
    errs = rng.random((trials, spec.l)) < ber
    failures = sum(
        not hard_decode(truth ^ row, truth, spec).ok for row in errs.astype(np.uint8))
    want = p_ecfr(spec.l, spec.capability_t, ber)
    assert failures / trials == pytest.approx(want, rel=0.10)


def test_miscorrection_produces_wrong_word_that_crc_catches():
    spec = _spec(l=64, t=2, mis=1.0)
    truth = np.random.default_rng(0).integers(0, 2, 64).astype(np.uint8)
    raw = truth.copy()
    raw[:5] ^= 1
    res = hard_decode(raw, truth, spec, rng=np.random.default_rng(1))
    assert res.ok and res.miscorrected
    assert not np.array_equal(res.bits, truth)
    assert not crc_check(res.bits, crc_attach(truth))


def test_codeword_spec_validation():
    with pytest.raises(ValueError):
        CodewordSpec(l=100, k=90)  # not a byte multiple
    with pytest.raises(ValueError):
        CodewordSpec(l=128, k=128)
    assert CodewordSpec(l=1024, k=896).rate == pytest.approx(0.875)


# ------------------------------------------------------------------------ CRC


def test_crc_round_trip_and_flip_detection():
    data = np.random.default_rng(5).integers(0, 2, 864).astype(np.uint8)
    meta = crc_attach(data)
    assert crc_check(data, meta)
    flipped = data.copy()
    flipped[13] ^= 1
    assert not crc_check(flipped, meta)


def test_crc_empty_is_constant_zero():
    assert crc_attach(b"") == 0
    assert crc_attach(np.zeros(0, dtype=np.uint8)) == 0


def test_crc_bits_round_trip():
    meta = crc_attach(b"flash")
    assert crc_from_bits(crc_to_bits(meta)) == meta


# ------------------------------------------------------------------------ LLR


def test_llr_pinned_example():
    assert compute_llr(60, 60, -100, 45) == pytest.approx(25600 / 4050, abs=1e-9)


def test_llr_zero_at_symmetric_midpoint():
    assert compute_llr(-20, 60, -100, 45) == pytest.approx(0.0)


def test_llr_sign_convention():
    assert compute_llr(55, 60, -100, 45) > 0  # near mu0: bit 0 likelier
    assert compute_llr(-90, 60, -100, 45) < 0


def test_llr_affine_slope():
    mu0, mu1, sigma = 60.0, -100.0, 45.0
    slope = (compute_llr(10, mu0, mu1, sigma)
             - compute_llr(0, mu0, mu1, sigma)) / 10
    assert slope == pytest.approx((mu0 - mu1) / sigma**2)


# --------------------------------------------------------------- soft binning


def _boundary(bit_lo=1, bit_hi=0):
    return BoundarySpec(ref=0.0, mu_lo=-50.0, sigma_lo=10.0,
                        mu_hi=50.0, sigma_hi=10.0, bit_lo=bit_lo, bit_hi=bit_hi)


def test_soft_offsets_symmetric():
    assert np.allclose(soft_offsets(3, 4.0), [-4.0, 0.0, 4.0])
    assert np.allclose(soft_offsets(1, 4.0), [0.0])
    assert np.allclose(soft_offsets(2, 4.0), [-2.0, 2.0])


def test_level_one_yields_two_opposite_magnitudes():
    b = _boundary()
    word = soft_read(np.array([-30.0, -1.0, 1.0, 30.0]), [b], level=1)
    mags = np.unique(np.abs(word.llrs))
    assert mags.size == 1
    assert word.llrs[0] < 0 and word.llrs[2] > 0  # low side carries bit 1
    assert word.llrs[0] == -word.llrs[3]


def test_level_three_llrs_monotone_across_bins():
    b = _boundary(bit_lo=0, bit_hi=1)  # mu0 (bit 0) on the low-voltage side
    volts = np.array([-40.0, -2.0, 2.0, 40.0])  # one cell per bin
    word = soft_read(volts, [b], level=3, spacing=4.0)
    assert word.level == 3
    assert list(word.llrs) == sorted(word.llrs, reverse=True)
    assert word.llrs[0] > 0 > word.llrs[-1]


def test_soft_read_quantizes_to_fixed_point():
    word = soft_read(np.array([-3.3, 3.7]), [_boundary()], level=3)
    assert np.array_equal(word.llrs * 256, np.rint(word.llrs * 256))


def test_soft_read_assigns_cells_to_nearest_boundary():
    b0 = BoundarySpec(0.0, -50, 10, 50, 10, bit_lo=1, bit_hi=0)
    b1 = BoundarySpec(100.0, 50, 10, 150, 10, bit_lo=0, bit_hi=1)
    word = soft_read(np.array([-10.0, 110.0]), [b0, b1], level=1)
    assert word.llrs[0] < 0  # below b0: bit 1
    assert word.llrs[1] < 0  # above b1: bit 1


def test_boundary_spec_validation():
    with pytest.raises(ValueError):
        BoundarySpec(0.0, -50, 10, 50, 10, bit_lo=1, bit_hi=1)
    with pytest.raises(ValueError):
        BoundarySpec(-60.0, -50, 10, 50, 10, bit_lo=1, bit_hi=0)


# ----------------------------------------------------------------------- LDPC


@pytest.fixture(scope="module")
def small_code():
    return build_ldpc(CodewordSpec(l=256, k=192), seed=20_240_701)


def test_ldpc_construction_structure(small_code):
    h = small_code.h
    m = small_code.l - small_code.k
    assert h.shape == (m, 256)
    col_weights = h.sum(axis=0)
    assert set(col_weights) <= {3, 4}
    # girth >= 6: no two columns may share more than one check row
    gram = h.T.astype(np.int64) @ h.astype(np.int64)
    np.fill_diagonal(gram, 0)
    assert gram.max() <= 1
    assert h.sum(axis=1).min() >= 2


def test_ldpc_construction_is_seeded_deterministic():
    a = build_ldpc(CodewordSpec(l=256, k=192), seed=42)
    b = build_ldpc(CodewordSpec(l=256, k=192), seed=42)
    c = build_ldpc(CodewordSpec(l=256, k=192), seed=43)
    assert np.array_equal(a.h, b.h)
    assert not np.array_equal(a.h, c.h)


def test_ldpc_encode_satisfies_all_checks(small_code):
    rng = np.random.default_rng(9)
    for _ in range(1000):
        data = rng.integers(0, 2, small_code.k).astype(np.uint8)
        cw = ldpc_encode(small_code, data)
        assert ldpc_syndrome_ok(small_code, cw)
        assert np.array_equal(ldpc_extract_data(small_code, cw), data)


def test_ldpc_decode_clean_word_converges_immediately(small_code):
    data = np.random.default_rng(1).integers(0, 2, small_code.k).astype(np.uint8)
    cw = ldpc_encode(small_code, data)
    llr = LlrWord(np.where(cw == 0, 8.0, -8.0), level=1)
    res = ldpc_decode(llr, small_code)
    assert res.ok and res.iterations <= 2
    assert np.array_equal(ldpc_extract_data(small_code, res.bits), data)


def test_ldpc_decode_corrects_a_few_flips(small_code):
    rng = np.random.default_rng(2)
    data = rng.integers(0, 2, small_code.k).astype(np.uint8)
    cw = ldpc_encode(small_code, data)
    noisy = cw.copy()
    noisy[rng.choice(small_code.l, size=6, replace=False)] ^= 1
    llr = LlrWord(np.where(noisy == 0, 4.0, -4.0), level=1)
    res = ldpc_decode(llr, small_code)
    assert res.ok
    assert np.array_equal(ldpc_extract_data(small_code, res.bits), data)


def test_ldpc_decode_random_signs_fails(small_code):
    rng = np.random.default_rng(3)
    llr = LlrWord(rng.choice([-4.0, 4.0], size=small_code.l), level=1)
    res = ldpc_decode(llr, small_code)
    assert not res.ok
    assert res.iterations == small_code.max_iterations


def test_higher_soft_level_never_hurts_success_rate(small_code):
    # fixed ensemble of noisy single-boundary pages, decoded at levels 1 and 3
    rng = np.random.default_rng(7)
    mu0, mu1, sigma = 30.0, -30.0, 18.0
    b = BoundarySpec(0.0, mu1, sigma, mu0, sigma, bit_lo=1, bit_hi=0)
    wins = {1: 0, 3: 0}
    for _ in range(120):
        data = rng.integers(0, 2, small_code.k).astype(np.uint8)
        cw = ldpc_encode(small_code, data)
        volts = np.where(cw == 0, mu0, mu1) + rng.normal(0, sigma, small_code.l)
        for level in (1, 3):
            word = soft_read(volts, [b], level=level)
            if ldpc_decode(word, small_code).ok:
                wins[level] += 1
    assert wins[3] >= wins[1]
    assert wins[3] > 0
