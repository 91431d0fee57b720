"""Embedded threshold-voltage calibration tables and CSV interchange.

Three measurement axes are shipped: program/erase wear, retention age, and
read-disturb count. Each row holds the per-state Gaussian mean and standard
deviation on the normalized voltage scale (nominal max Vth = 512). The wear
axis was measured at 1-day age and a single read; the retention and disturb
axes were measured on 2,000-cycle blocks, so their first rows are the shared
baseline the drift composition subtracts.

Cells marked reconstructed below were lost from the source data set; they are
smooth interpolations anchored to the surviving values and are covered by the
frozen expectations in the test suite.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

STATE_NAMES = ("ER", "P1", "P2", "P3", "P4", "P5", "P6", "P7")
N_STATES = len(STATE_NAMES)

AXIS_PEC = "pec"
AXIS_RETENTION = "retention"
AXIS_DISTURB = "disturb"
AXES = (AXIS_PEC, AXIS_RETENTION, AXIS_DISTURB)

DAY_S = 86_400.0
WEEK_S = 604_800.0
MONTH_S = 2_592_000.0
THREE_MONTHS_S = 7_776_000.0
YEAR_S = 31_536_000.0

# axis -> list of (key, per-state means, per-state sigmas), keys ascending.
# Retention keys are seconds.
DEFAULT_ROWS: dict[str, list[tuple[float, tuple[float, ...], tuple[float, ...]]]] = {
    AXIS_PEC: [
        (0.0,
         (-110.0, 65.9, 127.4, 191.6, 254.9, 318.4, 384.8, 448.3),
         (45.9, 9.0, 9.4, 8.9, 8.8, 8.9, 9.3, 8.5)),
        (200.0,
         (-110.4, 66.6, 128.3, 192.8, 255.5, 319.3, 385.0, 448.6),
         (46.2, 9.2, 9.8, 9.0, 8.8, 9.0, 9.1, 8.5)),
        (400.0,
         (-105.0, 66.0, 127.3, 191.7, 254.5, 318.2, 383.9, 447.7),
         (46.4, 9.2, 9.5, 9.1, 8.8, 8.8, 9.0, 8.6)),
        (1000.0,
         (-99.9, 66.5, 127.1, 191.7, 254.8, 318.1, 384.4, 447.8),
         # sigmas reconstructed
         (47.1, 9.2, 9.6, 9.2, 8.9, 8.9, 9.1, 8.7)),
        (2000.0,
         (-92.7, 66.6, 128.1, 191.9, 254.9, 318.3, 384.3, 448.1),
         # P3..P7 sigmas reconstructed
         (48.2, 9.2, 9.8, 9.3, 9.0, 9.0, 9.2, 8.8)),
        (3000.0,
         (-84.1, 68.3, 128.2, 193.1, 255.7, 319.2, 385.4, 449.1),
         # sigmas reconstructed
         (49.3, 9.5, 10.1, 9.6, 9.3, 9.3, 9.5, 9.1)),
    ],
    AXIS_RETENTION: [
        (DAY_S,
         (-92.7, 66.6, 128.1, 191.9, 254.9, 318.3, 384.3, 448.1),
         (48.2, 9.7, 9.7, 9.4, 9.3, 9.1, 9.5, 9.1)),
        (WEEK_S,
         (-86.7, 67.5, 128.1, 191.4, 253.8, 316.5, 381.8, 444.9),
         (46.4, 10.7, 10.8, 10.5, 10.6, 10.3, 10.6, 10.6)),
        (MONTH_S,
         (-84.4, 68.6, 128.7, 191.6, 253.5, 315.8, 380.9, 443.6),
         # sigmas reconstructed
         (45.3, 11.2, 11.3, 10.9, 11.0, 10.7, 11.0, 10.5)),
        (THREE_MONTHS_S,
         (-75.6, 72.8, 131.6, 193.3, 254.3, 315.7, 380.2, 442.2),
         # sigmas reconstructed
         (44.0, 11.8, 11.8, 11.4, 11.4, 11.1, 11.4, 10.4)),
        (YEAR_S,
         (-69.4, 76.6, 134.2, 195.2, 255.3, 316.0, 379.6, 440.8),
         # ER..P6 sigmas reconstructed
         (42.8, 12.4, 12.3, 11.9, 11.8, 11.5, 11.8, 10.3)),
    ],
    AXIS_DISTURB: [
        (1.0,
         (-84.2, 66.2, 126.3, 191.5, 253.7, 316.8, 384.3, 448.0),
         (48.2, 9.7, 9.7, 9.4, 9.3, 9.1, 9.5, 9.1)),
        (1000.0,
         (-76.1, 66.7, 126.6, 191.5, 253.6, 316.4, 383.8, 447.5),
         (48.2, 9.7, 9.7, 9.4, 9.3, 9.1, 9.5, 9.1)),
        (10000.0,
         (-57.0, 67.9, 127.0, 191.5, 253.3, 315.7, 382.9, 445.7),
         # sigmas reconstructed
         (47.4, 9.9, 9.8, 9.5, 9.4, 9.2, 9.6, 9.2)),
        (50000.0,
         (-33.4, 69.9, 128.0, 191.9, 253.3, 315.4, 382.0, 444.1),
         # sigmas reconstructed
         (46.2, 10.3, 10.0, 9.6, 9.4, 9.3, 9.7, 9.4)),
        (100000.0,
         (-20.4, 71.6, 128.8, 192.1, 253.3, 315.0, 381.1, 443.0),
         # P1..P7 sigmas reconstructed
         (45.2, 10.8, 10.2, 9.8, 9.5, 9.4, 9.9, 9.6)),
    ],
}

CSV_COLUMNS = ("axis", "key", "state", "mean", "sigma")


@dataclass(frozen=True)
class TableRow:
    key: float
    means: tuple[float, ...]
    sigmas: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.means) != N_STATES or len(self.sigmas) != N_STATES:
            raise ValueError("row must carry one mean and sigma per state")
        if any(s <= 0 for s in self.sigmas):
            raise ValueError("sigma must be positive")


def default_rows() -> dict[str, list[TableRow]]:
    return {
        axis: [TableRow(k, m, s) for k, m, s in rows]
        for axis, rows in DEFAULT_ROWS.items()
    }


def state_index(state: int | str) -> int:
    if isinstance(state, str):
        try:
            return STATE_NAMES.index(state)
        except ValueError:
            raise KeyError(f"unknown state {state!r}") from None
    if not 0 <= state < N_STATES:
        raise KeyError(f"unknown state ordinal {state}")
    return state


def export_rows_csv(rows: dict[str, list[TableRow]], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for axis in AXES:
            for row in rows[axis]:
                for i, name in enumerate(STATE_NAMES):
                    writer.writerow(
                        [axis, f"{row.key:.10g}", name,
                         f"{row.means[i]:.10g}", f"{row.sigmas[i]:.10g}"])


def import_rows_csv(path: str) -> dict[str, list[TableRow]]:
    staged: dict[str, dict[float, dict[int, tuple[float, float]]]] = {
        axis: {} for axis in AXES}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise ValueError(f"expected header {','.join(CSV_COLUMNS)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(CSV_COLUMNS):
                raise ValueError(f"line {lineno}: expected {len(CSV_COLUMNS)} fields")
            axis, key_s, state, mean_s, sigma_s = rec
            if axis not in AXES:
                raise ValueError(f"line {lineno}: unknown axis {axis!r}")
            staged[axis].setdefault(float(key_s), {})[state_index(state)] = (
                float(mean_s), float(sigma_s))
    rows: dict[str, list[TableRow]] = {}
    for axis in AXES:
        if not staged[axis]:
            raise ValueError(f"axis {axis!r} has no rows")
        axis_rows = []
        for key in sorted(staged[axis]):
            per_state = staged[axis][key]
            if sorted(per_state) != list(range(N_STATES)):
                raise ValueError(f"axis {axis!r} key {key:g}: incomplete state set")
            axis_rows.append(TableRow(
                key,
                tuple(per_state[i][0] for i in range(N_STATES)),
                tuple(per_state[i][1] for i in range(N_STATES))))
        rows[axis] = axis_rows
    return rows
