"""Error-correction stack: analytic failure rate, capability-t hard decoding,
LLR computation and multi-level soft binning, a real seeded LDPC min-sum
decoder, and the codeword CRC."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._rng import substream

LLR_SCALE = 256  # LLRs are quantized to 1/256 for reproducibility

CRC_BITS = 32


@dataclass(frozen=True)
class CodewordSpec:
    """One ECC engine: l-bit codewords carrying k data bits.

    capability_t parameterizes the hard bounded-distance model; the LDPC path
    ignores it and derives strength from the parity-check density (l - k).
    """

    l: int
    k: int
    capability_t: int = 0
    miscorrection_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.l % 8 != 0:
            raise ValueError("codeword length must be a multiple of 8 bits")
        if not 0 < self.k < self.l:
            raise ValueError("need 0 < k < l")
        if self.capability_t < 0 or not 0 <= self.miscorrection_prob <= 1:
            raise ValueError("bad capability or miscorrection probability")

    @property
    def rate(self) -> float:
        return self.k / self.l


@dataclass(frozen=True)
class DecodeResult:
    ok: bool
    bits: np.ndarray  # corrected codeword bits on success, raw bits on failure
    error_count: int = 0
    miscorrected: bool = False
    iterations: int = 0


def p_ecfr(l: int, t: int, ber: float) -> float:
    """Probability that more than t of l independent bits flip.

    Σ_{j=t+1..l} C(l,j) ber^j (1-ber)^(l-j), summed in log space so tiny
    tails at large l stay accurate.
    """
    if not 0 <= ber <= 1:
        raise ValueError("ber must be in [0, 1]")
    if not 0 <= t <= l:
        raise ValueError("need 0 <= t <= l")
    if t == l:
        return 0.0
    if ber == 0.0:
        return 0.0
    if ber == 1.0:
        return 1.0
    j = np.arange(t + 1, l + 1, dtype=np.float64)
    log_comb = (
        math.lgamma(l + 1)
        - np.array([math.lgamma(v + 1) for v in j])
        - np.array([math.lgamma(l - v + 1) for v in j])
    )
    log_terms = log_comb + j * math.log(ber) + (l - j) * math.log1p(-ber)
    peak = float(np.max(log_terms))
    return float(min(1.0, math.exp(peak) * float(np.sum(np.exp(log_terms - peak)))))


def hard_decode(raw: np.ndarray, truth: np.ndarray, spec: CodewordSpec,
                rng: np.random.Generator | None = None) -> DecodeResult:
    """Bounded-distance decode against the simulator's shadow truth.

    Succeeds exactly when the raw word is within capability_t of the truth.
    With a configured miscorrection probability, an over-capability word may
    instead come back "successfully" decoded to a wrong word, which only the
    CRC stage can catch.
    """
    raw = np.asarray(raw, dtype=np.uint8)
    truth = np.asarray(truth, dtype=np.uint8)
    if raw.shape != truth.shape or raw.shape != (spec.l,):
        raise ValueError("raw and truth must both be l bits")
    errors = int(np.sum(raw != truth))
    if errors <= spec.capability_t:
        return DecodeResult(True, truth.copy(), errors)
    if spec.miscorrection_prob > 0 and rng is not None:
        if rng.random() < spec.miscorrection_prob:
            wrong = truth.copy()
            flips = rng.choice(spec.l, size=max(1, spec.capability_t), replace=False)
            wrong[flips] ^= 1
            return DecodeResult(True, wrong, errors, miscorrected=True)
    return DecodeResult(False, raw.copy(), errors)


# ------------------------------------------------------------------------ CRC


def crc_attach(data: np.ndarray | bytes) -> int:
    """32-bit cyclic checksum (standard reflected construction) of data bits."""
    return zlib.crc32(_as_bytes(data)) & 0xFFFFFFFF


def crc_check(data: np.ndarray | bytes, meta: int) -> bool:
    return crc_attach(data) == meta


def crc_to_bits(meta: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(
        int(meta).to_bytes(4, "big"), dtype=np.uint8))


def crc_from_bits(bits: np.ndarray) -> int:
    if bits.shape != (CRC_BITS,):
        raise ValueError("need exactly 32 checksum bits")
    return int.from_bytes(np.packbits(bits.astype(np.uint8)).tobytes(), "big")


def _as_bytes(data: np.ndarray | bytes) -> bytes:
    if isinstance(data, (bytes, bytearray)):
        return bytes(data)
    bits = np.asarray(data, dtype=np.uint8)
    if bits.size % 8 != 0:
        raise ValueError("bit array length must be a multiple of 8")
    return np.packbits(bits).tobytes()


# ------------------------------------------------------------------ LLR model


def compute_llr(bin_midpoint_voltage: float, mu0: float, mu1: float,
                sigma: float) -> float:
    """Gaussian-channel log likelihood ratio of bit 0 over bit 1.

    Affine in the representative voltage y: positive means bit 0 is likelier.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    y = bin_midpoint_voltage
    return (mu1**2 - mu0**2) / (2 * sigma**2) + y * (mu0 - mu1) / sigma**2


@dataclass(frozen=True)
class LlrWord:
    llrs: np.ndarray  # 1/256-quantized, finite
    level: int

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.llrs)):
            raise ValueError("LLRs must be finite")
        if self.level < 1:
            raise ValueError("soft level must be >= 1")


@dataclass(frozen=True)
class BoundarySpec:
    """One read boundary between two adjacent states of a page's bit position."""

    ref: float
    mu_lo: float
    sigma_lo: float
    mu_hi: float
    sigma_hi: float
    bit_lo: int  # bit value read below the boundary
    bit_hi: int

    def __post_init__(self) -> None:
        if self.bit_lo == self.bit_hi:
            raise ValueError("a boundary must separate different bit values")
        if not self.mu_lo < self.ref < self.mu_hi:
            raise ValueError("boundary reference must lie between the state means")


def soft_offsets(level: int, spacing: float) -> np.ndarray:
    """Reference offsets for one boundary: `level` reads centered on the ref."""
    if level < 1:
        raise ValueError("soft level must be >= 1")
    return (np.arange(level) - (level - 1) / 2.0) * spacing


def soft_read(voltages: np.ndarray, boundaries: Sequence[BoundarySpec],
              level: int, spacing: float = 4.0) -> LlrWord:
    """Bin cell voltages around each boundary and map bins to LLRs.

    Each boundary is re-read `level` times at symmetric offsets, yielding
    level+1 bins; inner bins use their midpoint voltage, open outer bins use
    the adjacent state mean pushed 2 sigma outward, so deep cells carry
    confident LLRs. Cells are attributed to their nearest boundary.
    """
    if not boundaries:
        raise ValueError("need at least one boundary")
    v = np.asarray(voltages, dtype=np.float64)
    refs = np.array([b.ref for b in boundaries])
    if np.any(np.diff(refs) <= 0):
        raise ValueError("boundaries must be ordered by reference voltage")
    nearest = np.argmin(np.abs(v[:, None] - refs[None, :]), axis=1)
    offs = soft_offsets(level, spacing)
    out = np.empty(v.shape, dtype=np.float64)
    for bi, b in enumerate(boundaries):
        mask = nearest == bi
        if not np.any(mask):
            continue
        sigma = 0.5 * (b.sigma_lo + b.sigma_hi)
        if b.bit_lo == 0:
            mu0, mu1 = b.mu_lo, b.mu_hi
        else:
            mu0, mu1 = b.mu_hi, b.mu_lo
        sub = b.ref + offs
        mids = np.empty(level + 1)
        mids[0] = b.mu_lo - 2 * sigma
        mids[-1] = b.mu_hi + 2 * sigma
        if level > 1:
            mids[1:-1] = 0.5 * (sub[:-1] + sub[1:])
        bins = np.searchsorted(sub, v[mask], side="right")
        table = np.array([compute_llr(m, mu0, mu1, sigma) for m in mids])
        out[mask] = table[bins]
    out = np.round(out * LLR_SCALE) / LLR_SCALE
    return LlrWord(out, level)


# ----------------------------------------------------------------------- LDPC


@dataclass(frozen=True)
class LdpcCode:
    """Seeded quasi-regular LDPC code with a dense-per-check decoder layout."""

    spec: CodewordSpec
    h: np.ndarray                 # parity-check matrix, (m, l) uint8
    data_pos: np.ndarray          # codeword positions holding data bits
    parity_pos: np.ndarray        # codeword positions holding parity bits
    encode_matrix: np.ndarray     # (m, k): parity = encode_matrix @ data mod 2
    slot_var: np.ndarray          # (m, w_max) var index per check slot, -1 pad
    slot_valid: np.ndarray        # (m, w_max) bool
    max_iterations: int = 30
    scale: float = 0.75

    @property
    def l(self) -> int:
        return self.spec.l

    @property
    def k(self) -> int:
        return self.spec.k


def _gf2_row_reduce(mat: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """In-place GF(2) elimination; returns reduced matrix and pivot columns."""
    m, n = mat.shape
    pivots: list[int] = []
    row = 0
    for col in range(n):
        if row >= m:
            break
        hit = np.nonzero(mat[row:, col])[0]
        if hit.size == 0:
            continue
        swap = row + int(hit[0])
        if swap != row:
            mat[[row, swap]] = mat[[swap, row]]
        others = np.nonzero(mat[:, col])[0]
        for r in others:
            if r != row:
                mat[r] ^= mat[row]
        pivots.append(col)
        row += 1
    return mat, pivots


def build_ldpc(spec: CodewordSpec, seed: int, max_iterations: int = 30,
               scale: float = 0.75) -> LdpcCode:
    """Construct a seeded parity-check matrix: column weight alternates 3/4,
    no two columns share two rows (girth >= 6), full row rank."""
    n, m = spec.l, spec.l - spec.k
    if m < 5:
        raise ValueError("parity-check matrix needs at least 5 rows")
    for attempt in range(64):
        rng = substream(seed, "ecc", "ldpc", n, m, attempt)
        used_pairs: set[tuple[int, int]] = set()
        row_deg = np.zeros(m, dtype=np.int64)
        cols: list[np.ndarray] = []
        failed = False
        for col in range(n):
            weight = 3 if col % 2 == 0 else 4
            placed = None
            for _ in range(300):
                pref = 1.0 / (1.0 + row_deg)
                pick = rng.choice(m, size=weight, replace=False,
                                  p=pref / pref.sum())
                pick = np.sort(pick)
                pairs = [(int(a), int(b)) for i, a in enumerate(pick)
                         for b in pick[i + 1:]]
                if all(p not in used_pairs for p in pairs):
                    placed = pick
                    used_pairs.update(pairs)
                    row_deg[pick] += 1
                    break
            if placed is None:
                failed = True
                break
            cols.append(placed)
        if failed or row_deg.min() < 2:
            continue
        h = np.zeros((m, n), dtype=np.uint8)
        for col, rows in enumerate(cols):
            h[rows, col] = 1
        reduced, pivots = _gf2_row_reduce(h.copy())
        if len(pivots) < m:
            continue
        parity_pos = np.array(pivots[:m], dtype=np.int64)
        mask = np.ones(n, dtype=bool)
        mask[parity_pos] = False
        data_pos = np.nonzero(mask)[0]
        # Solve Hp @ P = Hd so parity = P @ data satisfies H @ codeword = 0.
        aug = np.concatenate([h[:, parity_pos], h[:, data_pos]], axis=1)
        reduced_aug, aug_pivots = _gf2_row_reduce(aug)
        if aug_pivots[:m] != list(range(m)):
            continue
        encode_matrix = reduced_aug[:, m:].astype(np.uint8)
        w_max = int(h.sum(axis=1).max())
        slot_var = np.full((m, w_max), -1, dtype=np.int64)
        slot_valid = np.zeros((m, w_max), dtype=bool)
        for r in range(m):
            vs = np.nonzero(h[r])[0]
            slot_var[r, : vs.size] = vs
            slot_valid[r, : vs.size] = True
        return LdpcCode(spec, h, data_pos, parity_pos, encode_matrix,
                        slot_var, slot_valid, max_iterations, scale)
    raise RuntimeError("LDPC construction failed; relax the code parameters")


def ldpc_encode(code: LdpcCode, data: np.ndarray) -> np.ndarray:
    data = np.asarray(data, dtype=np.uint8)
    if data.shape != (code.k,):
        raise ValueError(f"need {code.k} data bits")
    parity = (code.encode_matrix @ data.astype(np.int64)) & 1
    cw = np.zeros(code.l, dtype=np.uint8)
    cw[code.data_pos] = data
    cw[code.parity_pos] = parity.astype(np.uint8)
    return cw


def ldpc_extract_data(code: LdpcCode, codeword: np.ndarray) -> np.ndarray:
    return np.asarray(codeword, dtype=np.uint8)[code.data_pos]


def ldpc_syndrome_ok(code: LdpcCode, codeword: np.ndarray) -> bool:
    bits = np.asarray(codeword, dtype=np.int64)
    return not np.any((code.h @ bits) & 1)


def ldpc_decode(llr_word: LlrWord, code: LdpcCode) -> DecodeResult:
    """Scaled min-sum belief propagation; succeeds when all checks clear."""
    llr = np.asarray(llr_word.llrs, dtype=np.float64)
    if llr.shape != (code.l,):
        raise ValueError(f"need {code.l} LLRs")
    sv, valid = code.slot_var, code.slot_valid
    safe_var = np.where(valid, sv, 0)
    c2v = np.zeros(sv.shape, dtype=np.float64)
    total = llr.copy()
    flat_var = safe_var.ravel()
    flat_valid = valid.ravel()
    for it in range(1, code.max_iterations + 1):
        hard = total < 0  # positive LLR = bit 0
        syndrome = np.bitwise_xor.reduce(
            np.where(valid, hard[safe_var], False), axis=1)
        if not syndrome.any():
            bits = hard.astype(np.uint8)
            return DecodeResult(True, bits, iterations=it - 1)
        v2c = np.where(valid, total[safe_var] - c2v, np.inf)
        mag = np.abs(v2c)
        sgn = np.where(v2c < 0, -1.0, 1.0)
        sign_prod = np.prod(np.where(valid, sgn, 1.0), axis=1)
        order = np.argsort(mag, axis=1)
        min1 = np.take_along_axis(mag, order[:, :1], axis=1)
        min2 = np.take_along_axis(mag, order[:, 1:2], axis=1)
        use = np.where(mag == min1, min2, min1)
        c2v = np.where(valid,
                       code.scale * sign_prod[:, None] * sgn * use,
                       0.0)
        acc = np.bincount(flat_var[flat_valid],
                          weights=c2v.ravel()[flat_valid],
                          minlength=code.l)
        total = llr + acc
    hard = (total < 0).astype(np.uint8)
    return DecodeResult(False, hard, iterations=code.max_iterations)
