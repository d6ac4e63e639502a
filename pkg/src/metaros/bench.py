"""Benchmark harness: throughput, latency, and reliability scenarios.

Each scenario is self-contained: it serves its own broker (in-process
or TCP loopback), runs publisher and subscriber nodes, and reduces the
run to the standard reports.  Rates are computed with exact rational
arithmetic from nanosecond windows, so the bits-per-second figure is
exactly messages-per-second times encoded frame bits on uniform runs.
"""

from __future__ import annotations

import gc
import itertools
import socket
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from metaros.broker import BrokerConfig, broker_serve
from metaros.envelope import HEADER_SIZE, PayloadType
from metaros.metrics import (
    CpuSampler,
    LatencyCollector,
    compute_bandwidth,
    compute_throughput,
    summarize,
)
from metaros.nodegraph import Node, TopicSpec
from metaros.reliability import QosProfile, ReliabilityMode
from metaros.transport import FaultProfile, wrap_with_faults

_scenario_ids = itertools.count(1)

DEFAULT_PAYLOAD_SIZES = (256, 4096, 65536, 1048576)
BENCH_TOPIC = "bench/data"


@dataclass
class BenchScenario:
    """Parameters of one benchmark run."""

    transport: str = "inproc"  # "inproc" or "tcp"
    payload_sizes: tuple[int, ...] = DEFAULT_PAYLOAD_SIZES
    duration_per_size: float = 10.0
    # Deep history: a saturating publisher can burst far ahead of the
    # subscriber's executor within one interpreter time slice.
    qos: QosProfile = field(default_factory=lambda: QosProfile(history_depth=8192))
    fault: Optional[FaultProfile] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if any(size <= 0 for size in self.payload_sizes):
            raise ValueError("payload sizes must be positive")
        if self.duration_per_size < 0.05:
            raise ValueError("duration per size too small")
        if self.transport not in ("inproc", "tcp"):
            raise ValueError("transport must be inproc or tcp")

    def comment(self) -> str:
        fault = ""
        if self.fault is not None:
            fault = (f" drop={self.fault.drop_probability} dup={self.fault.duplicate_probability}"
                     f" delay_ms={self.fault.delay_range_ms}")
        return (f"transport={self.transport} sizes={list(self.payload_sizes)}"
                f" duration={self.duration_per_size}s qos={self.qos.mode.value}"
                f" seed={self.seed}{fault}")


def free_tcp_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as probe:
        probe.bind(("127.0.0.1", 0))
        return probe.getsockname()[1]


class _Rig:
    """Broker + one subscriber node + one publisher node."""

    def __init__(self, transport: str, qos: QosProfile,
                 fault: Optional[FaultProfile] = None,
                 heartbeat_interval: float = 0.5):
        if transport == "inproc":
            address = f"inproc://bench-{next(_scenario_ids)}-{time.monotonic_ns()}"
        else:
            address = f"tcp://127.0.0.1:{free_tcp_port()}"
        self.broker = broker_serve(address, BrokerConfig(heartbeat_interval=heartbeat_interval))
        self.address = address
        factory = None
        if fault is not None:
            factory = lambda conn: wrap_with_faults(conn, fault)  # noqa: E731
        self.sub_node = Node("bench_sub", address, heartbeat_interval=heartbeat_interval)
        self.pub_node = Node("bench_pub", address, heartbeat_interval=heartbeat_interval,
                             connection_factory=factory)
        self.qos = qos
        self._stop_spin = self.sub_node.spin_in_background()

    def close(self) -> None:
        self._stop_spin()
        self.pub_node.close()
        self.sub_node.close()
        self.broker.close()


def run_throughput_leg(transport: str, payload_size: int, duration: float,
                       qos: QosProfile) -> dict:
    """One payload size: saturating publish, counted at the subscriber."""
    rig = _Rig(transport, qos)
    try:
        topic = TopicSpec(BENCH_TOPIC, PayloadType.BYTES, qos)
        delivered = 0
        last_delivery_ns = 0
        latencies = LatencyCollector()
        done = threading.Event()

        def on_message(value, frame):
            nonlocal delivered, last_delivery_ns
            delivered += 1
            now = time.time_ns()
            last_delivery_ns = time.monotonic_ns()
            latencies.add(frame.timestamp_send, now)

        rig.sub_node.subscribe(topic, on_message)
        publisher = rig.pub_node.advertise(topic)
        payload = bytes(payload_size)
        frame_size = HEADER_SIZE + len(BENCH_TOPIC) + payload_size

        # warm the route end to end
        publisher.publish(payload)
        time.sleep(0.1)

        cpu = CpuSampler().start()
        reliable = qos.mode is ReliabilityMode.RELIABLE
        # The frame/delivery path is cycle-free refcounted allocation;
        # collector pauses would measure the process's GC history, not
        # the transport (timeit does the same).
        gc_was_enabled = gc.isenabled()
        gc.collect()
        gc.disable()
        start_ns = time.monotonic_ns()
        deadline = start_ns + int(duration * 1e9)
        published = 0
        try:
            while time.monotonic_ns() < deadline:
                publisher.publish(payload)
                published += 1
        finally:
            if gc_was_enabled:
                gc.enable()
        publish_end_ns = time.monotonic_ns()
        # drain: wait until the subscriber stops catching up
        settle_deadline = time.monotonic() + max(2.0, duration)
        previous = -1
        while time.monotonic() < settle_deadline:
            if delivered >= published + 1:
                break
            if delivered == previous:
                break
            previous = delivered
            time.sleep(0.05)
        cpu_report = cpu.stop()

        window_ns = max(last_delivery_ns - start_ns, publish_end_ns - start_ns, 1)
        window = Fraction(window_ns, 10**9)
        count = delivered
        throughput = compute_throughput(count, window)
        bandwidth = compute_bandwidth(count * frame_size * 8, window)
        lat = summarize([s.latency for s in latencies.snapshot()]) if len(latencies) else None
        return {
            "payload_size": payload_size,
            "published": published + 1,
            "delivered": count,
            "frame_size": frame_size,
            "window_s": float(window),
            "msg_per_s": float(throughput.rate),
            "bit_per_s": float(bandwidth.rate),
            "msg_per_s_exact": throughput.rate,
            "bit_per_s_exact": bandwidth.rate,
            "p50_latency": lat.p50 if lat else 0,
            "p99_latency": lat.p99 if lat else 0,
            "cpu_mean": round(cpu_report.mean, 4),
        }
    finally:
        rig.close()


def run_throughput(scenario: BenchScenario) -> list[dict]:
    return [
        run_throughput_leg(scenario.transport, size, scenario.duration_per_size, scenario.qos)
        for size in scenario.payload_sizes
    ]


def run_latency(transport: str = "inproc", samples: int = 1000, payload_size: int = 256,
                rate_hz: float = 1000.0, delay_ms: float = 0.0, seed: int = 0) -> dict:
    """Paced single-stream latency measurement, optional injected delay."""
    fault = None
    if delay_ms > 0:
        fault = FaultProfile(delay_range_ms=(delay_ms, delay_ms), seed=seed, data_only=True)
    rig = _Rig(transport, QosProfile(), fault=fault)
    try:
        topic = TopicSpec(BENCH_TOPIC, PayloadType.BYTES, QosProfile(history_depth=max(64, samples)))
        latencies = LatencyCollector()
        received = threading.Event()
        count = 0

        def on_message(value, frame):
            nonlocal count
            latencies.add(frame.timestamp_send, time.time_ns())
            count += 1
            if count >= samples:
                received.set()

        rig.sub_node.subscribe(topic, on_message)
        publisher = rig.pub_node.advertise(topic)
        payload = bytes(payload_size)
        interval = 1.0 / rate_hz
        for _ in range(samples):
            publisher.publish(payload)
            time.sleep(interval)
        received.wait(timeout=5.0 + delay_ms / 1000 * 2)
        summary = latencies.summary()
        return {
            "samples": len(latencies),
            "anomalies": latencies.anomalies,
            "min_ns": summary.min,
            "p50_ns": summary.p50,
            "p95_ns": summary.p95,
            "p99_ns": summary.p99,
            "max_ns": summary.max,
            "mean_ns": summary.mean,
            "collector": latencies,
        }
    finally:
        rig.close()


def run_reliability(count: int = 10000, drop: float = 0.2, duplicate: float = 0.05,
                    reliable: bool = True, seed: int = 42,
                    history_depth: int = 2048, transport: str = "inproc",
                    max_retries: int = 8) -> dict:
    """Seeded lossy-link run; reports unique deliveries and ordering."""
    fault = FaultProfile(drop_probability=drop, duplicate_probability=duplicate,
                         seed=seed, data_only=True)
    if reliable:
        qos = QosProfile.reliable(history_depth=history_depth, max_retries=max_retries)
    else:
        qos = QosProfile.best_effort(history_depth=history_depth)
    rig = _Rig(transport, qos, fault=fault)
    try:
        topic = TopicSpec(BENCH_TOPIC, PayloadType.INT64, qos)
        delivered: list[int] = []
        done = threading.Event()

        def on_message(value):
            delivered.append(value)
            if len(delivered) >= count:
                done.set()

        rig.sub_node.subscribe(topic, on_message)
        publisher = rig.pub_node.advertise(topic)
        outcomes = []
        for i in range(count):
            outcomes.append(publisher.publish(i))
        if reliable:
            budget = (qos.max_retries + 1) * qos.ack_timeout + sum(
                min(qos.backoff_base * 2**k, qos.backoff_max) for k in range(qos.max_retries)
            )
            deadline = time.monotonic() + budget + 10.0
            for outcome in outcomes:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                outcome.wait(remaining)
            done.wait(timeout=5.0)
        else:
            time.sleep(1.0)

        subscription = rig.sub_node._subs[0]
        in_order = all(a < b for a, b in zip(delivered, delivered[1:]))
        failed = sum(1 for o in outcomes if o is not None and o.done and not o.delivered)
        return {
            "published": count,
            "delivered": len(delivered),
            "unique": len(set(delivered)),
            "in_order": in_order,
            "duplicates_suppressed": subscription.duplicates,
            "gaps": subscription.gaps,
            "retransmissions": rig.pub_node._retry.retransmissions,
            "failed": failed,
            "delivered_values": delivered,
        }
    finally:
        rig.close()
