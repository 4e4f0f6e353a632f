"""Seeded key-value workload generation (YCSB-B-like: 95% reads)."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional


@dataclass(frozen=True)
class WorkloadConfig:
    rate: float = 2000.0  # requests/s, Poisson interarrivals
    read_fraction: float = 0.95
    key_count: int = 1000
    value_size: int = 132
    request_count: Optional[int] = None
    duration: Optional[float] = None  # seconds; used when request_count is None
    seed: int = 0

    def total_requests(self) -> int:
        if self.request_count is not None:
            return self.request_count
        if self.duration is not None:
            return max(int(self.duration * self.rate), 0)
        return 0


@dataclass(frozen=True)
class Request:
    at: float  # seconds from workload start
    op: str  # "get" | "put"
    key: str
    value: bytes


def load_phase(cfg: WorkloadConfig, count: int = 12_000):
    """PUT requests covering the key space before the timed run."""
    rng = random.Random(cfg.seed ^ 0x10AD)
    for i in range(count):
        key = f"k{i % cfg.key_count}"
        yield Request(0.0, "put", key, rng.randbytes(cfg.value_size))


def generate(cfg: WorkloadConfig):
    """The timed request schedule; reproducible for one seed."""
    rng = random.Random(cfg.seed)
    t = 0.0
    for _ in range(cfg.total_requests()):
        t += rng.expovariate(cfg.rate)
        key = f"k{rng.randrange(cfg.key_count)}"
        if rng.random() < cfg.read_fraction:
            yield Request(t, "get", key, b"")
        else:
            yield Request(t, "put", key, rng.randbytes(cfg.value_size))
