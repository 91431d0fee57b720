"""flashrel: a deterministic NAND-flash reliability simulator.

Models per-cell threshold-voltage distributions and their drift with wear,
retention age, and read disturb; programs and reads pages through a full
controller stack (scrambling, ECC, mapping, garbage collection, bad-block and
parity handling); and layers the error-mitigation and recovery techniques on
top, with lifetime analytics and a scenario CLI.
"""

__version__ = "0.1.0"

from .voltage_model import (
    CalibrationTables,
    Condition,
    ReadRefSet,
    StateStats,
    ThresholdModel,
    VoltageState,
    birth_refs,
    composed_stats,
    decode_bits,
    encode_bits,
    lookup_stats,
    optimal_read_refs,
    sample_voltage,
)

__all__ = [
    "__version__",
    "CalibrationTables",
    "Condition",
    "ReadRefSet",
    "StateStats",
    "ThresholdModel",
    "VoltageState",
    "birth_refs",
    "composed_stats",
    "decode_bits",
    "encode_bits",
    "lookup_stats",
    "optimal_read_refs",
    "sample_voltage",
]
