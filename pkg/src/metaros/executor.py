"""Fair-share executor for node callbacks.

Work (subscription deliveries, timer fires, service and action handlers)
is grouped into schedulable entities.  Each scheduling round picks the
ready entity with the smallest virtual runtime, grants it a time slice

    slice_i = sched_period * weight_i / total_ready_weight

runs queued work up to that budget, then charges the measured wall time
back as virtual runtime

    vruntime_i += (base_weight / weight_i) * measured_ns

so heavier-weighted entities accumulate vruntime more slowly and are
picked proportionally more often.  All arithmetic is integer nanoseconds.

The executor is swappable: :class:`FifoExecutor` satisfies the same
interface with plain arrival-order dispatch and no fairness guarantee.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

log = logging.getLogger(__name__)

_entity_ids = itertools.count(1)

NS_PER_MS = 1_000_000


@dataclass
class SchedulerConfig:
    """Scheduling constants, in nanoseconds.

    ``sched_period_ns`` is the round length shared proportionally among
    ready entities; ``base_weight`` is the weight at which one nanosecond
    of real runtime costs one nanosecond of virtual runtime;
    ``min_slice_ns`` floors the per-round budget so slices stay useful
    when many entities are ready.
    """

    sched_period_ns: int = 20 * NS_PER_MS
    base_weight: int = 1024
    min_slice_ns: int = 100_000

    def __post_init__(self) -> None:
        if self.sched_period_ns <= 0:
            raise ValueError("sched_period_ns must be positive")
        if self.base_weight < 1:
            raise ValueError("base_weight must be >= 1")


class ScheduleEntity:
    """Executor bookkeeping for one stream of callbacks."""

    __slots__ = ("id", "name", "weight", "vruntime", "ready", "queue", "epoch",
                 "picks", "runtime_ns", "dropped", "closed")

    def __init__(self, weight: int = 1024, name: str = ""):
        if weight < 1:
            raise ValueError("weight must be >= 1")
        self.id = next(_entity_ids)
        self.name = name or f"entity-{self.id}"
        self.weight = weight
        self.vruntime = 0  # nanoseconds, monotonically nondecreasing
        self.ready = False
        self.queue: deque[Callable[[], None]] = deque()
        self.epoch = 0  # invalidates stale heap entries
        self.picks = 0
        self.runtime_ns = 0
        self.dropped = 0
        self.closed = False

    def __repr__(self) -> str:
        return f"<ScheduleEntity {self.name} w={self.weight} v={self.vruntime}ns ready={self.ready}>"


def compute_time_slice(entity: ScheduleEntity, config: SchedulerConfig, total_weight: int) -> int:
    """Per-round execution budget in nanoseconds.

    ``total_weight`` is the weight sum over all ready entities (including
    this one).  The proportional share is rounded to the nearest
    nanosecond and floored at ``min_slice_ns``.
    """
    if total_weight < entity.weight:
        raise ValueError("total_weight must include the entity's own weight")
    slice_ns = (config.sched_period_ns * entity.weight * 2 + total_weight) // (2 * total_weight)
    return max(slice_ns, config.min_slice_ns)


def account(entity: ScheduleEntity, real_runtime_ns: int, config: SchedulerConfig) -> ScheduleEntity:
    """Charge measured runtime as virtual runtime, rounding toward zero."""
    if real_runtime_ns < 0:
        raise ValueError("real_runtime_ns must be nonnegative")
    entity.vruntime += (config.base_weight * real_runtime_ns) // entity.weight
    return entity


def pick_next(ready: Iterable[ScheduleEntity]) -> Optional[ScheduleEntity]:
    """Ready entity with minimal vruntime, ties broken by lowest id.

    Linear form of the selection rule; the executor maintains the same
    order in a heap with logarithmic updates.  Returns None when nothing
    is ready (idle, not an error).
    """
    best: Optional[ScheduleEntity] = None
    for entity in ready:
        if not entity.ready:
            continue
        if best is None or (entity.vruntime, entity.id) < (best.vruntime, best.id):
            best = entity
    return best


@dataclass
class EntityStats:
    name: str
    weight: int
    picks: int
    runtime_ns: int
    vruntime_ns: int


@dataclass
class SpinStats:
    """Run statistics exported to the metrics layer."""

    picks: int = 0
    idle_waits: int = 0
    errors: int = 0
    entities: dict[int, EntityStats] = field(default_factory=dict)


class _Timer:
    __slots__ = ("entity", "callback", "rate", "cancelled")

    def __init__(self, entity: ScheduleEntity, callback: Callable[[], None], rate):
        self.entity = entity
        self.callback = callback
        self.rate = rate
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class CfsExecutor:
    """Weighted-fair executor; one thread per :meth:`spin` call runs callbacks."""

    def __init__(self, config: SchedulerConfig | None = None):
        self.config = config or SchedulerConfig()
        self._lock = threading.Lock()
        self._work_available = threading.Condition(self._lock)
        self._entities: dict[int, ScheduleEntity] = {}
        self._heap: list[tuple[int, int, int]] = []  # (vruntime, id, epoch)
        self._ready_weight = 0
        self._timers: list[tuple[int, int, _Timer]] = []
        self._timer_seq = itertools.count()
        self._stopped = threading.Event()
        self.on_pick: Optional[Callable[[ScheduleEntity, list[ScheduleEntity]], None]] = None

    # -- registration ---------------------------------------------------

    def create_entity(self, weight: int = 1024, name: str = "") -> ScheduleEntity:
        entity = ScheduleEntity(weight=weight, name=name)
        with self._lock:
            self._entities[entity.id] = entity
        return entity

    def remove_entity(self, entity: ScheduleEntity) -> None:
        with self._lock:
            entity.closed = True
            entity.queue.clear()
            if entity.ready:
                entity.ready = False
                self._ready_weight -= entity.weight
            self._entities.pop(entity.id, None)

    def add_timer(self, entity: ScheduleEntity, callback: Callable[[], None], rate) -> _Timer:
        """Enqueue ``callback`` to ``entity`` at each deadline of ``rate``."""
        timer = _Timer(entity, callback, rate)
        with self._lock:
            heapq.heappush(self._timers, (rate.next_deadline(), next(self._timer_seq), timer))
            self._work_available.notify_all()
        return timer

    # -- work submission (any thread) ------------------------------------

    def submit(self, entity: ScheduleEntity, item: Callable[[], None], max_queue: int = 0) -> bool:
        """Queue a callback on an entity; returns False if it displaced work.

        With ``max_queue`` > 0 the oldest queued item is dropped to make
        room (freshness over completeness).
        """
        if entity.closed:
            return False
        queue = entity.queue
        dropped = False
        if max_queue and len(queue) >= max_queue:
            try:
                queue.popleft()
                entity.dropped += 1
                dropped = True
            except IndexError:
                pass
        queue.append(item)
        # Fast path: a ready entity will be drained without a lock round
        # trip.  The spin loop re-checks the queue after clearing `ready`,
        # so an append racing that transition is never stranded.
        if not entity.ready:
            with self._lock:
                if not entity.ready and not entity.closed:
                    self._make_ready(entity)
                    self._work_available.notify_all()
        return not dropped

    def _make_ready(self, entity: ScheduleEntity) -> None:
        # Entering entities take max(own vruntime, current ready minimum):
        # a newcomer cannot monopolize the executor with a zero vruntime,
        # and vruntime never decreases.
        floor = self._min_ready_vruntime()
        if floor is not None and entity.vruntime < floor:
            entity.vruntime = floor
        entity.ready = True
        self._ready_weight += entity.weight
        entity.epoch += 1
        heapq.heappush(self._heap, (entity.vruntime, entity.id, entity.epoch))

    def _min_ready_vruntime(self) -> Optional[int]:
        while self._heap:
            vruntime, entity_id, epoch = self._heap[0]
            entity = self._entities.get(entity_id)
            if entity is None or not entity.ready or entity.epoch != epoch:
                heapq.heappop(self._heap)
                continue
            return vruntime
        return None

    def _pop_min_ready(self) -> Optional[ScheduleEntity]:
        while self._heap:
            vruntime, entity_id, epoch = heapq.heappop(self._heap)
            entity = self._entities.get(entity_id)
            if entity is None or not entity.ready or entity.epoch != epoch:
                continue
            return entity
        return None

    # -- dispatch ---------------------------------------------------------

    def _fire_due_timers(self, now_ns: int) -> Optional[int]:
        """Enqueue due timer callbacks; returns the next deadline or None.

        A deadline the loop reaches more than one period late (e.g. a
        callback stalled the thread) is skipped, not fired: missed cycles
        never bunch.
        """
        while self._timers:
            deadline, seq, timer = self._timers[0]
            if timer.cancelled:
                heapq.heappop(self._timers)
                continue
            if deadline > now_ns:
                return deadline
            heapq.heappop(self._timers)
            entity = timer.entity
            if now_ns < deadline + timer.rate.period_ns and not entity.closed:
                entity.queue.append(timer.callback)
                if not entity.ready:
                    self._make_ready(entity)
            timer.rate.skip_to_future(now_ns)
            heapq.heappush(self._timers, (timer.rate.next_deadline(), next(self._timer_seq), timer))
        return None

    def spin(
        self,
        duration: float | None = None,
        stop: Callable[[], bool] | None = None,
        stats: SpinStats | None = None,
    ) -> SpinStats:
        """Run callbacks until ``duration`` elapses or ``stop()`` is true.

        With neither given, runs until :meth:`shutdown`.  Callback
        exceptions are logged and charged to the entity; other entities
        are unaffected.
        """
        stats = stats or SpinStats()
        clock = time.monotonic_ns
        deadline_ns = clock() + int(duration * 1e9) if duration is not None else None
        config = self.config
        while not self._stopped.is_set():
            now = clock()
            if deadline_ns is not None and now >= deadline_ns:
                break
            if stop is not None and stop():
                break
            with self._lock:
                next_timer = self._fire_due_timers(now)
                entity = self._pop_min_ready()
                if entity is None:
                    stats.idle_waits += 1
                    wait_s = 0.05
                    if next_timer is not None:
                        wait_s = min(wait_s, max(next_timer - now, 0) / 1e9)
                    if deadline_ns is not None:
                        wait_s = min(wait_s, max(deadline_ns - now, 0) / 1e9)
                    self._work_available.wait(timeout=wait_s)
                    continue
                slice_ns = compute_time_slice(entity, config, self._ready_weight)
                queue = entity.queue
                if self.on_pick is not None:
                    self.on_pick(entity, [e for e in self._entities.values() if e.ready])
            # Run outside the lock: submissions continue concurrently.
            started = time.perf_counter_ns()
            elapsed = 0
            while elapsed < slice_ns:
                try:
                    item = queue.popleft()
                except IndexError:
                    break
                try:
                    item()
                except Exception:
                    stats.errors += 1
                    log.exception("callback raised in %s", entity.name)
                elapsed = time.perf_counter_ns() - started
            with self._lock:
                account(entity, elapsed, config)
                entity.picks += 1
                entity.runtime_ns += elapsed
                stats.picks += 1
                if entity.queue and not entity.closed:
                    entity.epoch += 1
                    heapq.heappush(self._heap, (entity.vruntime, entity.id, entity.epoch))
                else:
                    if entity.ready:
                        entity.ready = False
                        self._ready_weight -= entity.weight
                    # close the submit race: an append may have landed
                    # between the emptiness check and clearing `ready`
                    if entity.queue and not entity.closed:
                        self._make_ready(entity)
        with self._lock:
            for entity in self._entities.values():
                stats.entities[entity.id] = EntityStats(
                    entity.name, entity.weight, entity.picks, entity.runtime_ns, entity.vruntime
                )
        return stats

    def shutdown(self) -> None:
        self._stopped.set()
        with self._lock:
            self._work_available.notify_all()

    def reset_stop(self) -> None:
        self._stopped.clear()


class FifoExecutor:
    """Arrival-order executor: the minimal form of the swappable contract.

    Same interface as :class:`CfsExecutor`, no fairness property.
    """

    def __init__(self, config: SchedulerConfig | None = None):
        self.config = config or SchedulerConfig()
        self._lock = threading.Lock()
        self._work_available = threading.Condition(self._lock)
        self._queue: deque[tuple[ScheduleEntity, Callable[[], None]]] = deque()
        self._entities: dict[int, ScheduleEntity] = {}
        self._timers: list[tuple[int, int, _Timer]] = []
        self._timer_seq = itertools.count()
        self._stopped = threading.Event()

    def create_entity(self, weight: int = 1024, name: str = "") -> ScheduleEntity:
        entity = ScheduleEntity(weight=weight, name=name)
        with self._lock:
            self._entities[entity.id] = entity
        return entity

    def remove_entity(self, entity: ScheduleEntity) -> None:
        with self._lock:
            entity.closed = True
            self._entities.pop(entity.id, None)

    def add_timer(self, entity: ScheduleEntity, callback: Callable[[], None], rate) -> _Timer:
        timer = _Timer(entity, callback, rate)
        with self._lock:
            heapq.heappush(self._timers, (rate.next_deadline(), next(self._timer_seq), timer))
            self._work_available.notify_all()
        return timer

    def submit(self, entity: ScheduleEntity, item: Callable[[], None], max_queue: int = 0) -> bool:
        with self._lock:
            if entity.closed:
                return False
            self._queue.append((entity, item))
            self._work_available.notify_all()
            return True

    def spin(
        self,
        duration: float | None = None,
        stop: Callable[[], bool] | None = None,
        stats: SpinStats | None = None,
    ) -> SpinStats:
        stats = stats or SpinStats()
        clock = time.monotonic_ns
        deadline_ns = clock() + int(duration * 1e9) if duration is not None else None
        while not self._stopped.is_set():
            now = clock()
            if deadline_ns is not None and now >= deadline_ns:
                break
            if stop is not None and stop():
                break
            with self._lock:
                next_timer = None
                while self._timers:
                    timer_deadline, seq, timer = self._timers[0]
                    if timer.cancelled:
                        heapq.heappop(self._timers)
                        continue
                    if timer_deadline > now:
                        next_timer = timer_deadline
                        break
                    heapq.heappop(self._timers)
                    if now < timer_deadline + timer.rate.period_ns and not timer.entity.closed:
                        self._queue.append((timer.entity, timer.callback))
                    timer.rate.skip_to_future(now)
                    heapq.heappush(self._timers, (timer.rate.next_deadline(), next(self._timer_seq), timer))
                if not self._queue:
                    stats.idle_waits += 1
                    wait_s = 0.05
                    if next_timer is not None:
                        wait_s = min(wait_s, max(next_timer - now, 0) / 1e9)
                    if deadline_ns is not None:
                        wait_s = min(wait_s, max(deadline_ns - now, 0) / 1e9)
                    self._work_available.wait(timeout=wait_s)
                    continue
                entity, item = self._queue.popleft()
            started = time.perf_counter_ns()
            try:
                item()
            except Exception:
                stats.errors += 1
                log.exception("callback raised in %s", entity.name)
            elapsed = time.perf_counter_ns() - started
            with self._lock:
                entity.picks += 1
                entity.runtime_ns += elapsed
                stats.picks += 1
        with self._lock:
            for entity in self._entities.values():
                stats.entities[entity.id] = EntityStats(
                    entity.name, entity.weight, entity.picks, entity.runtime_ns, entity.vruntime
                )
        return stats

    def shutdown(self) -> None:
        self._stopped.set()
        with self._lock:
            self._work_available.notify_all()

    def reset_stop(self) -> None:
        self._stopped.clear()
