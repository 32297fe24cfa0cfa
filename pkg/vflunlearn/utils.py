import zlib
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Union

import pandas as pd

from vflunlearn.exceptions import ArgumentError

MASK64 = (1 << 64) - 1

METRICS_COLUMNS = [
    "round",
    "phase",
    "clean_acc",
    "backdoor_acc",
    "wall_ms",
    "drift",
    "dist_to_center",
]


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *labels: Union[int, str]) -> int:
    """Derive an independent 64-bit sub-seed from a master seed.

    Each label is folded into the state with one splitmix64 mixing step, so
    ``derive_seed(s, "local", 3, 7)`` is stable across processes and Python
    versions. String labels are reduced with CRC-32 (``hash`` is randomised
    per process and cannot be used).

    Args:
        master: The master seed of the run.
        *labels: Phase names, client ids, round indices, ...

    Returns:
        int: A seed in [0, 2**64).
    """
    state = _splitmix64(master & MASK64)
    for label in labels:
        token = label if isinstance(label, int) else zlib.crc32(str(label).encode())
        state = _splitmix64(state ^ (token & MASK64))
    return state


@dataclass
class MetricsRecord:
    """One row of metrics.csv."""

    round: int
    phase: str
    clean_acc: Optional[float] = None
    backdoor_acc: Optional[float] = None
    wall_ms: Optional[float] = None
    drift: Optional[float] = None
    dist_to_center: Optional[float] = None


def metrics_frame(records: Iterable[MetricsRecord]) -> pd.DataFrame:
    """Convert metrics records to a DataFrame with the stable column order."""
    rows: List[dict] = [asdict(r) for r in records]
    df = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    df["round"] = df["round"].astype("int64")
    return df


def read_metrics(path: str) -> pd.DataFrame:
    """Parse a metrics.csv file written by the harness.

    Empty fields come back as NaN.
    """
    df = pd.read_csv(path)
    missing = [c for c in METRICS_COLUMNS if c not in df.columns]
    if missing:
        raise ArgumentError(f"{path} is missing metrics columns: {missing}")
    return df[METRICS_COLUMNS]
