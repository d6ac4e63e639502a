"""Delivery guarantees: acknowledged retransmission, duplicate suppression,
and in-order release.

Reliable publishing is publisher-driven: the frame carries the
requires-ack flag, the broker acknowledges receipt, and the publisher
retransmits the identical frame until acknowledged or out of budget.
The delay before retry attempt k is ``min(backoff_base * 2**(k-1),
backoff_max)``, applied after each ack timeout expires.

The subscriber side holds no protocol state beyond a per-stream
deduplication window and, under RELIABLE, a bounded reorder buffer that
releases frames in sequence order.  A stream is one (publisher id,
topic) pair; publisher ids ride in the correlation field of DATA frames.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from metaros.envelope import Frame

log = logging.getLogger(__name__)

DEDUP_WINDOW = 1024


class ReliabilityMode(Enum):
    BEST_EFFORT = "best_effort"
    RELIABLE = "reliable"


@dataclass(frozen=True)
class QosProfile:
    """Per-endpoint delivery policy.

    ``history_depth`` bounds the subscriber queue and reorder buffer and
    doubles as the reliable publisher's in-flight window, so a matched
    profile on both ends keeps ordered delivery lossless within the
    retry budget.  Durations are seconds.
    """

    mode: ReliabilityMode = ReliabilityMode.BEST_EFFORT
    history_depth: int = 16
    max_retries: int = 5
    backoff_base: float = 0.05
    backoff_max: float = 2.0
    ack_timeout: float = 0.2

    def __post_init__(self) -> None:
        if self.history_depth < 1:
            raise ValueError("history_depth must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backoff_base > self.backoff_max:
            raise ValueError("backoff_base must not exceed backoff_max")
        if self.mode is ReliabilityMode.RELIABLE and self.max_retries < 1:
            raise ValueError("RELIABLE requires max_retries >= 1")

    @classmethod
    def reliable(cls, **overrides) -> "QosProfile":
        overrides.setdefault("mode", ReliabilityMode.RELIABLE)
        return cls(**overrides)

    @classmethod
    def best_effort(cls, **overrides) -> "QosProfile":
        overrides.setdefault("mode", ReliabilityMode.BEST_EFFORT)
        return cls(**overrides)


def backoff_delay(attempt: int, base: float, maximum: float) -> float:
    """Delay before retry attempt ``attempt`` (1-based): min(base*2^(k-1), max)."""
    if attempt < 1:
        raise ValueError("attempt is 1-based")
    return min(base * (2 ** (attempt - 1)), maximum)


class DeadlineScheduler:
    """One background thread firing callbacks at monotonic deadlines.

    Callbacks run on the scheduler thread and must be brief; exceptions
    are logged and swallowed.
    """

    class Handle:
        __slots__ = ("cancelled",)

        def __init__(self) -> None:
            self.cancelled = False

        def cancel(self) -> None:
            self.cancelled = True

    def __init__(self, name: str = "deadlines"):
        self._lock = threading.Lock()
        self._wake = threading.Condition(self._lock)
        self._heap: list[tuple[int, int, DeadlineScheduler.Handle, Callable[[], None]]] = []
        self._seq = itertools.count()
        self._stop = False
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._thread.start()

    def schedule(self, delay_s: float, fn: Callable[[], None]) -> "DeadlineScheduler.Handle":
        handle = DeadlineScheduler.Handle()
        due = time.monotonic_ns() + max(int(delay_s * 1e9), 0)
        with self._wake:
            if self._stop:
                raise RuntimeError("scheduler closed")
            heapq.heappush(self._heap, (due, next(self._seq), handle, fn))
            self._wake.notify()
        return handle

    def _run(self) -> None:
        while True:
            with self._wake:
                while not self._heap and not self._stop:
                    self._wake.wait()
                if self._stop:
                    return
                due, _, handle, fn = self._heap[0]
                now = time.monotonic_ns()
                if due > now:
                    self._wake.wait((due - now) / 1e9)
                    continue
                heapq.heappop(self._heap)
                if handle.cancelled:
                    continue
            try:
                fn()
            except Exception:
                log.exception("deadline callback raised")

    def close(self) -> None:
        with self._wake:
            self._stop = True
            self._heap.clear()
            self._wake.notify_all()


class DedupWindow:
    """Ring of the last ``DEDUP_WINDOW`` delivered sequence numbers per stream."""

    __slots__ = ("window", "_streams")

    def __init__(self, window: int = DEDUP_WINDOW):
        self.window = window
        self._streams: dict[tuple[bytes, str], tuple[set[int], deque[int]]] = {}

    def mark(self, key: tuple[bytes, str], sequence: int) -> bool:
        """Record a delivery; False means the sequence was already delivered."""
        state = self._streams.get(key)
        if state is None:
            state = self._streams[key] = (set(), deque())
        seen, ring = state
        if sequence in seen:
            return False
        seen.add(sequence)
        ring.append(sequence)
        if len(ring) > self.window:
            seen.discard(ring.popleft())
        return True

    def seen(self, key: tuple[bytes, str], sequence: int) -> bool:
        state = self._streams.get(key)
        return state is not None and sequence in state[0]


class _Stream:
    __slots__ = ("expected", "pending")

    def __init__(self) -> None:
        self.expected: Optional[int] = None
        self.pending: dict[int, Frame] = {}


class ReceiverState:
    """Per-subscription acceptance filter: dedup always, ordering when RELIABLE.

    ``accept`` returns the frames to hand to the callback, in delivery
    order.  Not thread-safe; callers serialize per subscription.
    """

    def __init__(self, qos: QosProfile):
        self.qos = qos
        self._ordered = qos.mode is ReliabilityMode.RELIABLE
        self.dedup = DedupWindow()
        self._streams: dict[tuple[bytes, str], _Stream] = {}
        self._last_corr: bytes | None = None
        self._last_topic: str | None = None
        self._last_state: tuple[set, deque] | None = None
        self.duplicates = 0
        self.stale = 0
        self.gaps = 0

    def accept(self, frame: Frame) -> list[Frame]:
        if not self._ordered:
            # best effort: dedup ring only, inlined for the hot path with
            # a single-stream cache (one publisher per topic dominates)
            if frame.correlation is self._last_corr and frame.topic == self._last_topic:
                state = self._last_state
            else:
                key = (frame.correlation, frame.topic)
                state = self.dedup._streams.get(key)
                if state is None:
                    state = self.dedup._streams[key] = (set(), deque())
                self._last_corr = frame.correlation
                self._last_topic = frame.topic
                self._last_state = state
            seen, ring = state
            sequence = frame.sequence
            if sequence in seen:
                self.duplicates += 1
                return []
            seen.add(sequence)
            ring.append(sequence)
            if len(ring) > self.dedup.window:
                seen.discard(ring.popleft())
            return [frame]

        key = (frame.correlation, frame.topic)
        stream = self._streams.get(key)
        if stream is None:
            stream = self._streams[key] = _Stream()
        seq = frame.sequence
        if stream.expected is None:
            stream.expected = seq
        if seq < stream.expected:
            if self.dedup.seen(key, seq):
                self.duplicates += 1
            else:
                self.stale += 1  # gap released past it; too late to order
            return []
        if seq == stream.expected:
            out = [frame]
            self.dedup.mark(key, seq)
            stream.expected = seq + 1
            while stream.expected in stream.pending:
                queued = stream.pending.pop(stream.expected)
                self.dedup.mark(key, queued.sequence)
                out.append(queued)
                stream.expected += 1
            return out
        # Out of order: hold back, bounded by history_depth.
        if seq in stream.pending or self.dedup.seen(key, seq):
            self.duplicates += 1
            return []
        stream.pending[seq] = frame
        out: list[Frame] = []
        while len(stream.pending) > self.qos.history_depth:
            lowest = min(stream.pending)
            self.gaps += lowest - stream.expected
            stream.expected = lowest
            while stream.expected in stream.pending:
                queued = stream.pending.pop(stream.expected)
                self.dedup.mark(key, queued.sequence)
                out.append(queued)
                stream.expected += 1
        return out


class DeliveryOutcome:
    """Resolution of one reliable publish: delivered, or failed with reason."""

    __slots__ = ("sequence", "_event", "_ok", "error", "attempts")

    def __init__(self, sequence: int):
        self.sequence = sequence
        self._event = threading.Event()
        self._ok: Optional[bool] = None
        self.error: Optional[str] = None
        self.attempts = 0

    def _resolve(self, ok: bool, error: Optional[str], attempts: int) -> None:
        if self._ok is not None:
            return
        self._ok = ok
        self.error = error
        self.attempts = attempts
        self._event.set()

    def wait(self, timeout: Optional[float] = None) -> Optional[bool]:
        """True delivered, False failed, None still pending after timeout."""
        if not self._event.wait(timeout):
            return None
        return self._ok

    @property
    def done(self) -> bool:
        return self._event.is_set()

    @property
    def delivered(self) -> bool:
        return self._ok is True


class _RetryEntry:
    __slots__ = ("frame", "qos", "attempt", "outcome", "key", "timer", "done")

    def __init__(self, frame: Frame, qos: QosProfile, outcome: DeliveryOutcome):
        self.frame = frame
        self.qos = qos
        self.attempt = 0  # retransmissions performed so far
        self.outcome = outcome
        self.key = (frame.correlation, frame.topic, frame.sequence)
        self.timer: Optional[DeadlineScheduler.Handle] = None
        self.done = False


class _Flow:
    """Sliding send window per publisher: sends stall at base + window."""

    __slots__ = ("lock", "cond", "unacked", "heap")

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.cond = threading.Condition(self.lock)
        self.unacked: set[int] = set()
        self.heap: list[int] = []

    def base(self) -> Optional[int]:
        while self.heap:
            if self.heap[0] in self.unacked:
                return self.heap[0]
            heapq.heappop(self.heap)
        return None

    def acquire(self, sequence: int, window: int, timeout: Optional[float]) -> bool:
        deadline = time.monotonic() + timeout if timeout is not None else None
        with self.cond:
            while True:
                base = self.base()
                if base is None or sequence < base + window:
                    self.unacked.add(sequence)
                    heapq.heappush(self.heap, sequence)
                    return True
                if deadline is None:
                    self.cond.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return False
                    self.cond.wait(remaining)

    def release(self, sequence: int) -> None:
        with self.cond:
            self.unacked.discard(sequence)
            self.cond.notify_all()


class RetryManager:
    """Publisher-side retransmission table driving reliable delivery.

    ``send`` is a callable taking a frame; resolving it through the node
    lets retransmissions survive reconnects.  Send failures while the
    link is down are tolerated: the attempt budget keeps ticking on wall
    time and later attempts go out once the link returns.
    """

    def __init__(self, send: Callable[[Frame], None], scheduler: DeadlineScheduler):
        self._send = send
        self._scheduler = scheduler
        self._lock = threading.Lock()
        self._entries: dict[tuple[bytes, str, int], _RetryEntry] = {}
        self._flows: dict[bytes, _Flow] = {}
        self._paused = False
        self.unknown_acks = 0
        self.failed = 0
        self.retransmissions = 0

    def pause(self) -> None:
        """Stop consuming retry budget while the link is known dead.

        Entries keep cycling on their ack timers but neither transmit nor
        count attempts until :meth:`resume`.
        """
        self._paused = True

    def resume(self) -> None:
        self._paused = False

    def pending_count(self) -> int:
        with self._lock:
            return len(self._entries)

    def send_reliable(self, frame: Frame, qos: QosProfile,
                      window_timeout: Optional[float] = None) -> DeliveryOutcome:
        outcome = DeliveryOutcome(frame.sequence)
        with self._lock:
            flow = self._flows.setdefault(frame.correlation, _Flow())
        if not flow.acquire(frame.sequence, qos.history_depth, window_timeout):
            outcome._resolve(False, "send window full", 0)
            self.failed += 1
            return outcome
        entry = _RetryEntry(frame, qos, outcome)
        with self._lock:
            self._entries[entry.key] = entry
        self._transmit(entry)
        return outcome

    def _transmit(self, entry: _RetryEntry) -> None:
        if entry.done:
            return
        try:
            self._send(entry.frame)
        except Exception:
            pass  # link down; the retry timer keeps the budget ticking
        entry.timer = self._scheduler.schedule(entry.qos.ack_timeout, lambda: self._on_ack_timeout(entry))

    def _on_ack_timeout(self, entry: _RetryEntry) -> None:
        with self._lock:
            if entry.done:
                return
            if self._paused:
                entry.timer = self._scheduler.schedule(
                    entry.qos.ack_timeout, lambda: self._on_ack_timeout(entry)
                )
                return
            if entry.attempt >= entry.qos.max_retries:
                self._finish(entry, ok=False,
                             error=f"delivery failed for sequence {entry.frame.sequence} "
                                   f"after {entry.attempt} retries")
                return
            entry.attempt += 1
            delay = backoff_delay(entry.attempt, entry.qos.backoff_base, entry.qos.backoff_max)
            self.retransmissions += 1
        entry.timer = self._scheduler.schedule(delay, lambda: self._transmit(entry))

    def handle_ack(self, ack: Frame) -> None:
        key = (ack.correlation, ack.topic, ack.sequence)
        with self._lock:
            entry = self._entries.get(key)
            if entry is None or entry.done:
                self.unknown_acks += 1
                return
            self._finish(entry, ok=True, error=None)

    def _finish(self, entry: _RetryEntry, ok: bool, error: Optional[str]) -> None:
        # caller holds the lock
        entry.done = True
        if entry.timer is not None:
            entry.timer.cancel()
        self._entries.pop(entry.key, None)
        if not ok:
            self.failed += 1
        flow = self._flows.get(entry.frame.correlation)
        entry.outcome._resolve(ok, error, entry.attempt)
        if flow is not None:
            flow.release(entry.frame.sequence)

    def fail_all(self, reason: str) -> None:
        with self._lock:
            entries = list(self._entries.values())
            for entry in entries:
                self._finish(entry, ok=False, error=reason)
