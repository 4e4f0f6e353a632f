"""Latency and throughput reporting.

Latency CSV schema: ``epoch_ms,p5_us,p25_us,p50_us,p75_us,p95_us,count``
(one row per 100 ms epoch).  Throughput CSV schema:
``chunnels,msg_size,msgs_per_s,gbits_per_s``.
"""

from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass, field

LATENCY_HEADER = ["epoch_ms", "p5_us", "p25_us", "p50_us", "p75_us", "p95_us", "count"]
THROUGHPUT_HEADER = ["chunnels", "msg_size", "msgs_per_s", "gbits_per_s"]
PERCENTILES = (5, 25, 50, 75, 95)


def percentile(sorted_values, q: float) -> float:
    """Linear-interpolated percentile of an already sorted sequence."""
    if not sorted_values:
        raise ValueError("no samples")
    if len(sorted_values) == 1:
        return float(sorted_values[0])
    pos = (q / 100.0) * (len(sorted_values) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(sorted_values) - 1)
    frac = pos - lo
    return sorted_values[lo] * (1 - frac) + sorted_values[hi] * frac


@dataclass
class EpochRow:
    epoch_ms: int
    p5_us: float
    p25_us: float
    p50_us: float
    p75_us: float
    p95_us: float
    count: int

    def as_list(self):
        return [
            self.epoch_ms,
            round(self.p5_us, 3),
            round(self.p25_us, 3),
            round(self.p50_us, 3),
            round(self.p75_us, 3),
            round(self.p95_us, 3),
            self.count,
        ]


@dataclass
class LatencyReport:
    rows: list = field(default_factory=list)
    total_count: int = 0
    overall_p50_us: float = 0.0

    @classmethod
    def from_samples(cls, samples, epoch_ms: int = 100) -> "LatencyReport":
        """Build per-epoch percentile rows from (timestamp_s, latency_s) pairs."""
        if not samples:
            return cls()
        t0 = min(t for t, _ in samples)
        buckets: dict[int, list] = {}
        for t, lat in samples:
            buckets.setdefault(int((t - t0) * 1000) // epoch_ms, []).append(lat * 1e6)
        rows = []
        for bucket in sorted(buckets):
            vals = sorted(buckets[bucket])
            rows.append(
                EpochRow(
                    bucket * epoch_ms,
                    *(percentile(vals, q) for q in PERCENTILES),
                    count=len(vals),
                )
            )
        all_vals = sorted(lat * 1e6 for _, lat in samples)
        return cls(rows, len(all_vals), percentile(all_vals, 50))

    def to_csv(self, fh) -> None:
        writer = csv.writer(fh)
        writer.writerow(LATENCY_HEADER)
        for row in self.rows:
            writer.writerow(row.as_list())

    def csv_text(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()

    def median_excluding(self, epochs_ms) -> float:
        """Overall p50 over rows outside the given epoch set (steady state)."""
        vals = []
        for row in self.rows:
            if row.epoch_ms in epochs_ms:
                continue
            vals.extend([row.p50_us] * row.count)
        vals.sort()
        return percentile(vals, 50) if vals else float("nan")


class SampleCollector:
    """Thread-safe accumulator for (timestamp, latency) samples."""

    def __init__(self):
        self._lock = threading.Lock()
        self._samples = []

    def add(self, t: float, latency: float):
        with self._lock:
            self._samples.append((t, latency))

    def extend(self, samples):
        with self._lock:
            self._samples.extend(samples)

    def snapshot(self):
        with self._lock:
            return list(self._samples)

    def report(self, epoch_ms: int = 100) -> LatencyReport:
        return LatencyReport.from_samples(self.snapshot(), epoch_ms)


def write_throughput_csv(fh, rows) -> None:
    """Rows: (chunnels, msg_size, msgs_per_s, gbits_per_s)."""
    writer = csv.writer(fh)
    writer.writerow(THROUGHPUT_HEADER)
    for chunnels, msg_size, mps, gbps in rows:
        writer.writerow([chunnels, msg_size, round(mps, 1), round(gbps, 6)])
