"""Performance metrics: latency, throughput, CPU, bandwidth, wire overhead.

All computations are pure and deterministic over their samples.  Ratios
keep the numeric type of their inputs, so passing `Fraction` windows or
counts yields exact rational results; the CSV layer renders floats.
"""

from __future__ import annotations

import csv
import math
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence, TextIO

from metaros.envelope import Frame, encoded_size


class MetricsError(Exception):
    pass


class ClockAnomalyError(MetricsError):
    """t_receive earlier than t_send: the clocks disagree."""


@dataclass(frozen=True)
class LatencySample:
    """One end-to-end delivery: latency = t_receive - t_send, nanoseconds."""

    t_send: int
    t_receive: int
    latency: int


@dataclass(frozen=True)
class ThroughputReport:
    """rate = message_count / window, messages per second."""

    message_count: int
    window: object
    rate: object


@dataclass(frozen=True)
class CpuReport:
    """mean of per-interval utilization fractions in [0, 1]."""

    samples: tuple
    mean: float


@dataclass(frozen=True)
class BandwidthReport:
    """rate = bits / window, bits per second; bits count full encoded frames."""

    bits: int
    window: object
    rate: object


@dataclass(frozen=True)
class WireOverheadReport:
    """overhead = total encoded size / payload size, an exact Fraction >= 1."""

    total_size: int
    payload_size: int
    overhead: Fraction


def compute_latency(t_send: int, t_receive: int) -> LatencySample:
    """Exact nanosecond difference; rejects clock anomalies."""
    if t_receive < t_send:
        raise ClockAnomalyError(f"t_receive {t_receive} < t_send {t_send}")
    return LatencySample(t_send, t_receive, t_receive - t_send)


def compute_throughput(count: int, window) -> ThroughputReport:
    if window <= 0:
        raise MetricsError("window must be positive")
    return ThroughputReport(count, window, count / window)


def compute_cpu(samples: Sequence[float]) -> CpuReport:
    if not samples:
        raise MetricsError("no CPU samples")
    for sample in samples:
        if not 0.0 <= sample <= 1.0:
            raise MetricsError(f"CPU sample {sample} out of [0, 1]")
    return CpuReport(tuple(samples), sum(samples) / len(samples))


def compute_bandwidth(bits: int, window) -> BandwidthReport:
    if window <= 0:
        raise MetricsError("window must be positive")
    return BandwidthReport(bits, window, bits / window)


def compute_wire_overhead(frame: Frame) -> WireOverheadReport:
    payload_size = len(frame.payload)
    if payload_size == 0:
        raise MetricsError("wire overhead is undefined for an empty payload")
    total = encoded_size(frame)
    return WireOverheadReport(total, payload_size, Fraction(total, payload_size))


@dataclass(frozen=True)
class Summary:
    min: float
    mean: float
    p50: float
    p95: float
    p99: float
    max: float


def summarize(samples: Iterable[float]) -> Summary:
    """Nearest-rank percentiles over the sorted samples."""
    ordered = sorted(samples)
    if not ordered:
        raise MetricsError("no samples to summarize")
    n = len(ordered)

    def rank(q: float):
        # nearest-rank: 1-based index ceil(q * n)
        return ordered[max(math.ceil(q * n), 1) - 1]

    return Summary(
        min=ordered[0],
        mean=sum(ordered) / n,
        p50=rank(0.50),
        p95=rank(0.95),
        p99=rank(0.99),
        max=ordered[-1],
    )


class LatencyCollector:
    """Append-only latency sink, safe for concurrent writers."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._samples: list[LatencySample] = []
        self.anomalies = 0

    def add(self, t_send: int, t_receive: int) -> Optional[LatencySample]:
        try:
            sample = compute_latency(t_send, t_receive)
        except ClockAnomalyError:
            with self._lock:
                self.anomalies += 1
            return None
        with self._lock:
            self._samples.append(sample)
        return sample

    def snapshot(self) -> list[LatencySample]:
        with self._lock:
            return list(self._samples)

    def __len__(self) -> int:
        with self._lock:
            return len(self._samples)

    def summary(self) -> Summary:
        return summarize([s.latency for s in self.snapshot()])


class CpuSampler:
    """Samples this process's CPU share of one core at a fixed cadence.

    Each sample is (process CPU time delta) / (wall time delta) for the
    interval, clamped to [0, 1].
    """

    def __init__(self, cadence: float = 0.1):
        self.cadence = cadence
        self._samples: list[float] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> "CpuSampler":
        self._thread = threading.Thread(target=self._run, name="cpu-sampler", daemon=True)
        self._thread.start()
        return self

    def _run(self) -> None:
        last_cpu = time.process_time()
        last_wall = time.monotonic()
        while not self._stop.wait(self.cadence):
            cpu = time.process_time()
            wall = time.monotonic()
            if wall > last_wall:
                share = (cpu - last_cpu) / (wall - last_wall)
                with self._lock:
                    self._samples.append(min(max(share, 0.0), 1.0))
            last_cpu, last_wall = cpu, wall

    def stop(self) -> CpuReport:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
        with self._lock:
            samples = list(self._samples) or [0.0]
        return compute_cpu(samples)


LATENCY_CSV_COLUMNS = ("t_send_ns", "t_receive_ns", "latency_ns")


def write_latency_csv(out: TextIO, samples: Iterable[LatencySample],
                      header_comment: str = "") -> None:
    if header_comment:
        out.write(f"# {header_comment}\n")
    writer = csv.writer(out)
    writer.writerow(LATENCY_CSV_COLUMNS)
    for sample in samples:
        writer.writerow((sample.t_send, sample.t_receive, sample.latency))


BENCH_CSV_COLUMNS = ("payload_size", "msg_per_s", "bit_per_s", "p50_latency", "p99_latency", "cpu_mean")


def write_bench_csv(out: TextIO, rows: Iterable[dict], header_comment: str = "") -> None:
    """One row per payload size; latencies in nanoseconds."""
    if header_comment:
        out.write(f"# {header_comment}\n")
    writer = csv.writer(out)
    writer.writerow(BENCH_CSV_COLUMNS)
    for row in rows:
        writer.writerow([row[column] for column in BENCH_CSV_COLUMNS])
