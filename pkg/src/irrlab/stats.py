from __future__ import annotations

import math
import statistics
from dataclasses import asdict, dataclass
from typing import Iterable


@dataclass(frozen=True)
class SummaryStats:
    """Sample statistics of a set of latency measurements (ms)."""

    mean_ms: float
    stddev_ms: float
    variance: float
    min: float
    max: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SummaryStats":
        return cls(**{k: d[k] for k in ("mean_ms", "stddev_ms", "variance", "min", "max", "n")})


def summarize(measurements: Iterable[float]) -> SummaryStats:
    """Mean, sample (n - 1) standard deviation and variance.

    The standard deviation is derived from the variance so the pair is
    self-consistent.
    """
    values = [float(v) for v in measurements]
    if len(values) < 2:
        raise ValueError(f"need at least 2 measurements, got {len(values)}")
    variance = statistics.variance(values)
    return SummaryStats(
        mean_ms=statistics.fmean(values),
        stddev_ms=math.sqrt(variance),
        variance=variance,
        min=min(values),
        max=max(values),
        n=len(values),
    )
