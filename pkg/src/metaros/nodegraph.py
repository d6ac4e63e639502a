"""Nodes: the developer-facing endpoint abstraction.

A node owns one broker connection and hands every piece of inbound work
(subscription deliveries, timer fires, service and action handlers) to
its executor, so callbacks for one node never run concurrently.
Publishing is safe from any thread.

Strong typing is enforced locally: a publisher rejects values that do
not encode to its declared payload type before anything touches the
wire, and a subscription discards frames whose declared type differs
from its own, counting them instead of delivering.
"""

from __future__ import annotations

import json
import logging
import os
import re
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from metaros import actions as _actions
from metaros import services as _services
from metaros.broker import topic_matches
from metaros.envelope import (
    FLAG_ERROR_RESPONSE,
    FLAG_REQUIRES_ACK,
    Frame,
    FrameKind,
    PayloadType,
    ZERO_CORRELATION,
    decode_typed_payload,
    encode_typed_payload,
)
from metaros.executor import CfsExecutor
from metaros.reliability import (
    DeadlineScheduler,
    DeliveryOutcome,
    QosProfile,
    ReceiverState,
    ReliabilityMode,
    RetryManager,
    backoff_delay,
)
from metaros import transport
from metaros.transport import Connection, EndpointAddress, TransportError

log = logging.getLogger(__name__)

BROKER_ENV_VAR = "METAROS_BROKER"
DEFAULT_BROKER = "tcp://127.0.0.1:7447"
RESERVED_PREFIX = "__"

_TOPIC_RE = re.compile(r"^[A-Za-z0-9_]+(/[A-Za-z0-9_]+)*$")
_PARAM_SET = struct.Struct("!H")

PARAMETER_TYPES = frozenset(
    {PayloadType.BOOL, PayloadType.INT64, PayloadType.FLOAT64, PayloadType.STRING_UTF8}
)

_NATIVE_TYPES = {PayloadType.BYTES: bytes}


class NodeError(Exception):
    pass


class TopicNameError(NodeError):
    pass


class TypeMismatchError(NodeError):
    """Value does not encode to the declared payload type; nothing was sent."""


class AdvertiseError(NodeError):
    pass


class DeliveryError(NodeError):
    pass


class ParameterError(NodeError):
    pass


class UnknownParameterError(ParameterError):
    pass


class ParameterTypeError(ParameterError):
    pass


class ParameterValidationError(ParameterError):
    pass


def valid_topic(name: str) -> bool:
    return bool(_TOPIC_RE.match(name))


def valid_pattern(pattern: str) -> bool:
    if pattern.endswith("/*"):
        return valid_topic(pattern[:-2])
    return valid_topic(pattern)


def default_broker_address() -> str:
    return os.environ.get(BROKER_ENV_VAR, DEFAULT_BROKER)


@dataclass(frozen=True)
class TopicSpec:
    """A named, typed channel plus its delivery policy."""

    name: str
    payload_type: PayloadType
    qos: QosProfile = field(default_factory=QosProfile)

    def __post_init__(self) -> None:
        if not valid_pattern(self.name):
            raise TopicNameError(f"bad topic {self.name!r}: segments of [A-Za-z0-9_] joined by '/'")


@dataclass(frozen=True)
class ParameterDecl:
    """A typed, validated node parameter."""

    name: str
    type: PayloadType
    default: Any
    validator: Optional[Callable[[Any], bool]] = None

    def __post_init__(self) -> None:
        if self.type not in PARAMETER_TYPES:
            raise ParameterError(f"parameter type must be one of BOOL/INT64/FLOAT64/STRING_UTF8, not {self.type}")


def range_validator(lo, hi) -> Callable[[Any], bool]:
    return lambda value: lo <= value <= hi


def max_length_validator(limit: int) -> Callable[[Any], bool]:
    return lambda value: len(value) <= limit


class RateController:
    """Drift-free periodic deadlines: deadline(k) = epoch + k*period, exactly.

    A sleep that overruns its target by less than one period returns
    immediately and stays on cadence; overrunning by a full period or
    more skips the missed deadlines instead of bunching them.
    """

    __slots__ = ("period_ns", "epoch_ns", "cycle", "_clock", "_sleeper")

    def __init__(self, period: float, *, epoch_ns: Optional[int] = None,
                 clock: Callable[[], int] = time.monotonic_ns,
                 sleeper: Callable[[float], None] = time.sleep):
        if period <= 0:
            raise ValueError("period must be positive")
        self.period_ns = int(round(period * 1e9))
        self._clock = clock
        self._sleeper = sleeper
        self.epoch_ns = epoch_ns if epoch_ns is not None else clock()
        self.cycle = 0

    def deadline(self, k: int) -> int:
        return self.epoch_ns + k * self.period_ns

    def next_deadline(self) -> int:
        return self.deadline(self.cycle + 1)

    def skip_to_future(self, now_ns: int) -> None:
        """Consume the fired deadline; hop over any further missed ones."""
        self.cycle += 1
        if now_ns >= self.deadline(self.cycle + 1):
            self.cycle = (now_ns - self.epoch_ns) // self.period_ns

    def sleep(self, now_ns: Optional[int] = None) -> int:
        """Sleep until the next deadline; returns the wake time in ns.

        Late by under one period: return immediately (the late cycle runs
        now), next target unchanged.  Late by one full period or more:
        skip the missed cycles to the next future deadline.
        """
        now = now_ns if now_ns is not None else self._clock()
        target = self.deadline(self.cycle + 1)
        if now < target:
            self._sleeper((target - now) / 1e9)
            self.cycle += 1
            return target
        if now >= target + self.period_ns:
            self.cycle = (now - self.epoch_ns) // self.period_ns
        else:
            self.cycle += 1
        return now


class Publisher:
    """Typed sending end of one topic; sequence numbers start at 1."""

    def __init__(self, node: "Node", spec: TopicSpec, pub_id: bytes):
        self.node = node
        self.spec = spec
        self.pub_id = pub_id
        self._seq = 0
        self._seq_lock = threading.Lock()
        self._ptype = spec.payload_type
        self._native = _NATIVE_TYPES.get(spec.payload_type)
        self._reliable = spec.qos.mode is ReliabilityMode.RELIABLE
        self.published = 0
        self.send_drops = 0
        self._closed = False

    def publish(self, value: Any, *, block: bool = False,
                timeout: Optional[float] = None) -> Optional[DeliveryOutcome]:
        """Publish one value.

        BEST_EFFORT returns None.  RELIABLE returns the delivery outcome;
        with ``block`` the call waits for it and raises
        :class:`DeliveryError` on failure.
        """
        if self._closed:
            raise NodeError(f"publisher for {self.spec.name} is closed")
        if type(value) is self._native and self._native is bytes:
            payload_type, payload = self._ptype, value
        else:
            payload_type, payload = encode_typed_payload(value)
            if payload_type != self._ptype:
                raise TypeMismatchError(
                    f"topic {self.spec.name} is {self.spec.payload_type.name}, "
                    f"value encodes as {payload_type.name}"
                )
        reliable = self._reliable
        with self._seq_lock:
            self._seq += 1
            sequence = self._seq
        frame = Frame(
            FrameKind.DATA,
            payload_type,
            FLAG_REQUIRES_ACK if reliable else 0,
            sequence,
            time.time_ns(),
            self.spec.name,
            self.pub_id,
            payload,
        )
        self.published += 1
        if reliable:
            outcome = self.node._retry.send_reliable(frame, self.spec.qos, window_timeout=timeout)
            if block:
                ok = outcome.wait(timeout)
                if ok is False:
                    raise DeliveryError(outcome.error or "delivery failed")
            return outcome
        if not self.node._send_frame(frame, best_effort=True):
            self.send_drops += 1
        return None

    def publish_raw(self, payload_type: PayloadType, payload: bytes) -> None:
        """Publish pre-encoded payload bytes (replay path); best effort."""
        with self._seq_lock:
            self._seq += 1
            sequence = self._seq
        frame = Frame(
            FrameKind.DATA, payload_type, 0, sequence, time.time_ns(),
            self.spec.name, self.pub_id, payload,
        )
        self.published += 1
        if not self.node._send_frame(frame, best_effort=True):
            self.send_drops += 1

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.node._unadvertise(self)


class Subscription:
    """Typed receiving end; frames flow through QoS filtering to the callback."""

    def __init__(self, node: "Node", spec: TopicSpec, callback: Callable, *, weight: int = 1024):
        self.node = node
        self.spec = spec
        self._pattern = spec.name
        self.callback = callback
        self._wants_frame = _callback_arity(callback) >= 2
        self.entity = node._executor.create_entity(weight=weight, name=f"sub:{spec.name}")
        self._state = ReceiverState(spec.qos)
        self._state_lock = threading.Lock()
        self._ptype = spec.payload_type
        # BEST_EFFORT favors freshness: bounded queue, oldest dropped.
        # RELIABLE must reach the callback exactly once, so accepted frames
        # are never displaced; the publisher's send window bounds the flow.
        self._depth = spec.qos.history_depth if spec.qos.mode is ReliabilityMode.BEST_EFFORT else 0
        self.delivered = 0
        self.type_mismatches = 0
        self._closed = False

    @property
    def duplicates(self) -> int:
        return self._state.duplicates

    @property
    def gaps(self) -> int:
        return self._state.gaps

    def _offer(self, frame: Frame) -> None:
        """Transport thread: filter, then queue callback invocations."""
        if self._closed:
            return
        if frame.payload_type != self._ptype:
            self.type_mismatches += 1
            return
        with self._state_lock:
            accepted = self._state.accept(frame)
        if not accepted:
            return
        submit = self.node._executor.submit
        entity = self.entity
        depth = self._depth
        for item in accepted:
            submit(entity, _Delivery(self, item), max_queue=depth)

    def unsubscribe(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.node._unsubscribe(self)


class _Delivery:
    """One queued callback invocation; decodes on the executor thread."""

    __slots__ = ("sub", "frame")

    def __init__(self, sub: Subscription, frame: Frame):
        self.sub = sub
        self.frame = frame

    def __call__(self) -> None:
        sub = self.sub
        if sub._closed:
            return
        value = decode_typed_payload(self.frame.payload_type, self.frame.payload)
        sub.delivered += 1
        if sub._wants_frame:
            sub.callback(value, self.frame)
        else:
            sub.callback(value)


class RawSubscription:
    """Pattern subscription delivering whole frames, no type filter, no dedup."""

    def __init__(self, node: "Node", pattern: str, callback: Callable[[Frame], None],
                 *, weight: int = 1024, queue_depth: int = 256):
        self.node = node
        self.pattern = pattern
        self._pattern = pattern
        self.callback = callback
        self.queue_depth = queue_depth
        self.entity = node._executor.create_entity(weight=weight, name=f"raw:{pattern}")
        self.delivered = 0
        self._closed = False

    def _offer(self, frame: Frame) -> None:
        if self._closed:
            return
        def run(sub=self, frame=frame):
            if not sub._closed:
                sub.delivered += 1
                sub.callback(frame)
        self.node._executor.submit(self.entity, run, max_queue=self.queue_depth)

    def unsubscribe(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.node._unsubscribe(self)


def _callback_arity(callback: Callable) -> int:
    import inspect

    try:
        parameters = inspect.signature(callback).parameters.values()
    except (TypeError, ValueError):
        return 1
    count = 0
    for parameter in parameters:
        if parameter.kind in (parameter.POSITIONAL_ONLY, parameter.POSITIONAL_OR_KEYWORD):
            count += 1
        elif parameter.kind is parameter.VAR_POSITIONAL:
            return 2
    return count


class _Timer:
    def __init__(self, node: "Node", executor_timer, entity):
        self._node = node
        self._executor_timer = executor_timer
        self._entity = entity

    def cancel(self) -> None:
        self._executor_timer.cancel()
        self._node._executor.remove_entity(self._entity)


class _Param:
    __slots__ = ("decl", "value")

    def __init__(self, decl: ParameterDecl, value: Any):
        self.decl = decl
        self.value = value


class Node:
    """A named endpoint on one broker.

    ``name`` must be unique per broker; announcing a duplicate raises.
    The node owns a fair-scheduling executor unless one is supplied.
    """

    def __init__(
        self,
        name: str,
        address: "str | EndpointAddress | None" = None,
        *,
        executor=None,
        heartbeat_interval: float = 0.5,
        liveness_misses: int = 3,
        reconnect: bool = True,
        reconnect_budget: Optional[int] = None,
        reconnect_backoff_base: float = 0.05,
        reconnect_backoff_max: float = 2.0,
        retry_resume_delay: float = 0.5,
        rng_seed: Optional[int] = None,
        connection_factory: Optional[Callable[[Connection], Connection]] = None,
        announce_timeout: float = 5.0,
    ):
        _validate_node_name(name)
        self.name = name
        self.address = EndpointAddress.parse(address if address is not None else default_broker_address())
        self._executor = executor if executor is not None else CfsExecutor()
        self._owns_executor = executor is None
        self._heartbeat_interval = heartbeat_interval
        self._liveness_misses = liveness_misses
        self._reconnect_enabled = reconnect
        self._reconnect_budget = reconnect_budget
        self._reconnect_backoff = (reconnect_backoff_base, reconnect_backoff_max)
        self._retry_resume_delay = retry_resume_delay
        self._connection_factory = connection_factory
        self._announce_timeout = announce_timeout

        import random as _random

        self._rng = _random.Random(rng_seed) if rng_seed is not None else _random.Random()
        self._lock = threading.RLock()
        self._pubs: dict[bytes, Publisher] = {}
        self._subs: tuple = ()
        self._services: dict[str, _services.ServiceServer] = {}
        self._action_servers: dict[str, _actions.ActionServer] = {}
        self._goals: dict[bytes, _actions.ClientGoalHandle] = {}
        self._pending: dict[bytes, _services.CompletionToken] = {}
        self._params: dict[str, _Param] = {}
        self._param_services_up = False
        self._call_seq = 0
        self._closing = False
        self._failed = threading.Event()
        self._reconnecting = threading.Event()
        self._deadline = DeadlineScheduler(name=f"{name}-deadlines")
        self._retry = RetryManager(self._send_or_raise, self._deadline)
        self.stale_responses = 0
        self.best_effort_drops = 0
        self._last_heartbeat_ns = time.monotonic_ns()

        self._conn: Connection = self._open_connection()
        self._announce(timeout=announce_timeout)
        self._start_liveness_monitor()

    # -- connection management ------------------------------------------------

    def _open_connection(self) -> Connection:
        conn = transport.connect(self.address)
        if self._connection_factory is not None:
            conn = self._connection_factory(conn)
        conn.set_receiver(self._dispatch, self._on_conn_closed)
        return conn

    def _announce(self, timeout: float) -> None:
        response = self._control_request(
            FrameKind.ADVERTISE,
            topic="",
            payload=json.dumps({"role": "node", "node": self.name}).encode(),
            timeout=timeout,
        )
        if response.flags & FLAG_ERROR_RESPONSE:
            raise AdvertiseError(response.payload.decode("utf-8", errors="replace"))

    def _start_liveness_monitor(self) -> None:
        interval = self._heartbeat_interval

        def check() -> None:
            if self._closing or self._failed.is_set():
                return
            if not self._reconnecting.is_set():
                silent_ns = time.monotonic_ns() - self._last_heartbeat_ns
                if silent_ns > int(self._liveness_misses * interval * 1e9):
                    self._trigger_reconnect()
            self._deadline.schedule(interval, check)

        self._deadline.schedule(interval, check)

    def _on_conn_closed(self, error: Optional[Exception]) -> None:
        if self._closing:
            return
        self._trigger_reconnect()

    def _trigger_reconnect(self) -> None:
        if not self._reconnect_enabled:
            self._failed.set()
            self._retry.fail_all("node failed: reconnect disabled")
            return
        if self._reconnecting.is_set() or self._closing:
            return
        self._reconnecting.set()
        self._retry.pause()
        threading.Thread(target=self._reconnect_loop, name=f"{self.name}-reconnect", daemon=True).start()

    def _reconnect_loop(self) -> None:
        attempt = 0
        while not self._closing:
            attempt += 1
            if self._reconnect_budget is not None and attempt > self._reconnect_budget:
                log.error("%s: reconnect budget exhausted, node failed", self.name)
                self._failed.set()
                self._retry.fail_all("node failed: reconnect budget exhausted")
                self._reconnecting.clear()
                return
            time.sleep(backoff_delay(attempt, *self._reconnect_backoff))
            try:
                old = self._conn
                conn = self._open_connection()
                self._conn = conn
                try:
                    old.close()
                except Exception:
                    pass
                self._reregister()
                self._last_heartbeat_ns = time.monotonic_ns()
                self._reconnecting.clear()
                # settle interval: peers re-register before retransmissions flow
                self._deadline.schedule(self._retry_resume_delay, self._retry.resume)
                log.info("%s: reconnected to %s after %d attempts", self.name, self.address, attempt)
                return
            except Exception as exc:
                log.debug("%s: reconnect attempt %d failed: %s", self.name, attempt, exc)
                continue

    def _reregister(self) -> None:
        """Re-announce the node and every live handle on a fresh connection."""
        self._announce(timeout=self._announce_timeout)
        with self._lock:
            pubs = list(self._pubs.values())
            subs = self._subs
            services = list(self._services.values())
            action_servers = list(self._action_servers.values())
        for pub in pubs:
            self._advertise_publisher(pub.spec, pub.pub_id, timeout=self._announce_timeout)
        for sub in subs:
            self._send_sub(sub._pattern, timeout=self._announce_timeout)
        for server in services:
            self._register_service_frame(server.name, timeout=self._announce_timeout)
        for server in action_servers:
            self._register_action_frame(server.name, timeout=self._announce_timeout)

    @property
    def failed(self) -> bool:
        return self._failed.is_set()

    @property
    def connected(self) -> bool:
        return not self._conn.closed and not self._reconnecting.is_set()

    # -- frame plumbing ---------------------------------------------------------

    def _send_or_raise(self, frame: Frame) -> None:
        self._conn.send_frame(frame)

    def _send_frame(self, frame: Frame, best_effort: bool = False) -> bool:
        try:
            self._conn.send_frame(frame)
            return True
        except TransportError:
            if not self._closing:
                self._trigger_reconnect()
            if best_effort:
                self.best_effort_drops += 1
                return False
            raise

    def _new_correlation(self) -> bytes:
        while True:
            correlation = self._rng.randbytes(16)
            if correlation != ZERO_CORRELATION:
                return correlation

    def _next_call_seq(self) -> int:
        with self._lock:
            self._call_seq += 1
            return self._call_seq

    def _register_call(self, token: _services.CompletionToken) -> None:
        with self._lock:
            self._pending[token.correlation] = token

    def _schedule_call_timeout(self, token: _services.CompletionToken, timeout: float) -> None:
        def fire() -> None:
            if token.time_out():
                with self._lock:
                    self._pending.pop(token.correlation, None)

        self._deadline.schedule(timeout, fire)

    def _control_request(self, kind: FrameKind, topic: str, payload: bytes,
                         timeout: float, payload_type: PayloadType = PayloadType.STRING_UTF8) -> Frame:
        """Send a control frame and wait for the broker's echo."""
        correlation = self._new_correlation()
        token = _services.CompletionToken(correlation)
        with self._lock:
            self._pending[correlation] = token
        frame = Frame(kind, payload_type, 0, self._next_call_seq(), time.time_ns(),
                      topic, correlation, payload)
        self._conn.send_frame(frame)
        state = token.wait(timeout)
        with self._lock:
            self._pending.pop(correlation, None)
        if state is _services.CompletionState.PENDING:
            raise NodeError(f"broker did not confirm {kind.name} for {topic!r} within {timeout}s")
        return token.result

    # -- inbound dispatch (transport thread) --------------------------------------

    def _dispatch(self, frame: Frame) -> None:
        kind = frame.kind
        if kind == FrameKind.DATA:
            topic = frame.topic
            for sub in self._subs:
                pattern = sub._pattern
                if pattern == topic or topic_matches(pattern, topic):
                    sub._offer(frame)
            return
        if kind == FrameKind.ACK:
            self._retry.handle_ack(frame)
            return
        if kind == FrameKind.HEARTBEAT:
            self._last_heartbeat_ns = time.monotonic_ns()
            return
        if kind == FrameKind.SVC_RESP:
            with self._lock:
                token = self._pending.pop(frame.correlation, None)
            if token is None:
                self.stale_responses += 1
                return
            _services.resolve_from_response(token, frame)
            return
        if kind == FrameKind.SVC_REQ:
            server = self._services.get(frame.topic)
            if server is not None:
                server._handle_request(frame)
            else:
                self._send_frame(
                    Frame(FrameKind.SVC_RESP, PayloadType.STRING_UTF8, FLAG_ERROR_RESPONSE,
                          frame.sequence, time.time_ns(), frame.topic, frame.correlation,
                          f"no handler on node {self.name}".encode()),
                    best_effort=True,
                )
            return
        if kind == FrameKind.ACTION_GOAL:
            server = self._action_servers.get(frame.topic)
            if server is not None:
                server._handle_goal(frame)
            return
        if kind == FrameKind.ACTION_CANCEL:
            server = self._action_servers.get(frame.topic)
            if server is not None:
                server._handle_cancel(frame)
            return
        if kind == FrameKind.ACTION_FEEDBACK:
            goal = self._goals.get(frame.correlation)
            if goal is not None:
                goal._offer_feedback(frame)
            return
        if kind == FrameKind.ACTION_RESULT:
            goal = self._goals.get(frame.correlation)
            if goal is not None:
                goal._offer_result(frame)
            else:
                self.stale_responses += 1
            return
        if kind in (FrameKind.SUB, FrameKind.UNSUB, FrameKind.ADVERTISE, FrameKind.INFO_RESP):
            with self._lock:
                token = self._pending.pop(frame.correlation, None)
            if token is not None:
                token.resolve(frame)
            return
        log.debug("%s: unhandled frame kind %s", self.name, kind)

    # -- publish / subscribe -------------------------------------------------------

    def _check_name(self, name: str, internal: bool = False) -> None:
        if internal:
            return
        if not valid_topic(name):
            raise TopicNameError(f"bad name {name!r}: segments of [A-Za-z0-9_] joined by '/'")
        if name.startswith(RESERVED_PREFIX):
            raise TopicNameError(f"names starting with {RESERVED_PREFIX!r} are reserved")

    def _check_pattern(self, pattern: str) -> None:
        if not valid_pattern(pattern):
            raise TopicNameError(f"bad pattern {pattern!r}")

    def advertise(self, spec: TopicSpec, *, timeout: float = 5.0, _internal: bool = False) -> Publisher:
        """Declare a typed publisher; the broker enforces type agreement."""
        self._check_name(spec.name, _internal)
        pub_id = self._new_correlation()
        self._advertise_publisher(spec, pub_id, timeout=timeout)
        publisher = Publisher(self, spec, pub_id)
        with self._lock:
            self._pubs[pub_id] = publisher
        return publisher

    def _advertise_publisher(self, spec: TopicSpec, pub_id: bytes, timeout: float) -> None:
        correlation_token = _services.CompletionToken(pub_id)
        with self._lock:
            self._pending[pub_id] = correlation_token
        frame = Frame(
            FrameKind.ADVERTISE,
            spec.payload_type,
            0,
            self._next_call_seq(),
            time.time_ns(),
            spec.name,
            pub_id,
            json.dumps({"role": "publisher", "node": self.name}).encode(),
        )
        self._conn.send_frame(frame)
        state = correlation_token.wait(timeout)
        with self._lock:
            self._pending.pop(pub_id, None)
        if state is _services.CompletionState.PENDING:
            raise NodeError(f"broker did not confirm advertise of {spec.name!r}")
        response = correlation_token.result
        if response.flags & FLAG_ERROR_RESPONSE:
            raise AdvertiseError(response.payload.decode("utf-8", errors="replace"))

    def _unadvertise(self, publisher: Publisher) -> None:
        # correlation must be the publisher's id: it keys the broker's entry
        with self._lock:
            self._pubs.pop(publisher.pub_id, None)
        token = _services.CompletionToken(publisher.pub_id)
        with self._lock:
            self._pending[publisher.pub_id] = token
        frame = Frame(
            FrameKind.ADVERTISE,
            publisher.spec.payload_type,
            0,
            self._next_call_seq(),
            time.time_ns(),
            publisher.spec.name,
            publisher.pub_id,
            json.dumps({"role": "publisher", "node": self.name, "remove": True}).encode(),
        )
        try:
            self._conn.send_frame(frame)
            token.wait(2.0)
        except TransportError:
            pass
        finally:
            with self._lock:
                self._pending.pop(publisher.pub_id, None)

    def subscribe(self, spec: TopicSpec, callback: Callable, *, weight: int = 1024,
                  timeout: float = 5.0, _internal: bool = False) -> Subscription:
        """Install a typed callback for a topic or pattern."""
        if not spec.name.endswith("/*"):
            self._check_name(spec.name, _internal)
        elif not _internal:
            self._check_pattern(spec.name)
            if spec.name.startswith(RESERVED_PREFIX):
                raise TopicNameError(f"patterns starting with {RESERVED_PREFIX!r} are reserved")
        subscription = Subscription(self, spec, callback, weight=weight)
        with self._lock:
            self._subs = self._subs + (subscription,)
        try:
            self._send_sub(spec.name, timeout=timeout)
        except Exception:
            with self._lock:
                self._subs = tuple(s for s in self._subs if s is not subscription)
            self._executor.remove_entity(subscription.entity)
            raise
        return subscription

    def subscribe_raw(self, pattern: str, callback: Callable[[Frame], None], *,
                      weight: int = 1024, queue_depth: int = 256,
                      timeout: float = 5.0) -> RawSubscription:
        """Observe every DATA frame matching a pattern, types and all."""
        self._check_pattern(pattern)
        subscription = RawSubscription(self, pattern, callback, weight=weight, queue_depth=queue_depth)
        with self._lock:
            self._subs = self._subs + (subscription,)
        try:
            self._send_sub(pattern, timeout=timeout)
        except Exception:
            with self._lock:
                self._subs = tuple(s for s in self._subs if s is not subscription)
            self._executor.remove_entity(subscription.entity)
            raise
        return subscription

    def _send_sub(self, pattern: str, timeout: float) -> None:
        self._control_request(
            FrameKind.SUB,
            topic=pattern,
            payload=json.dumps({"node": self.name}).encode(),
            timeout=timeout,
        )

    def _unsubscribe(self, subscription) -> None:
        with self._lock:
            self._subs = tuple(s for s in self._subs if s is not subscription)
        self._executor.remove_entity(subscription.entity)
        try:
            self._control_request(FrameKind.UNSUB, topic=subscription._pattern, payload=b"", timeout=2.0)
        except (TransportError, NodeError):
            pass

    # -- services ---------------------------------------------------------------

    def create_service(self, name: str, request_type: PayloadType,
                       response_type: Optional[PayloadType], handler: Callable[[Any], Any],
                       **kwargs) -> _services.ServiceServer:
        return _services.create_service(self, name, request_type, response_type, handler, **kwargs)

    def call_async(self, name: str, request: Any,
                   timeout: float = _services.DEFAULT_CALL_TIMEOUT) -> _services.CompletionToken:
        return _services.call_async(self, name, request, timeout)

    def call(self, name: str, request: Any, timeout: float = _services.DEFAULT_CALL_TIMEOUT) -> Any:
        """Convenience blocking call; raises on FAILED/TIMED_OUT."""
        token = self.call_async(name, request, timeout)
        state = token.wait(timeout + 1.0)
        if state is _services.CompletionState.READY:
            return token.result
        raise _services.ServiceError(token.error or state.name)

    def _register_service(self, server: _services.ServiceServer, timeout: float) -> None:
        self._register_service_frame(server.name, timeout=timeout)
        with self._lock:
            self._services[server.name] = server

    def _register_service_frame(self, name: str, timeout: float) -> None:
        response = self._control_request(
            FrameKind.ADVERTISE,
            topic=name,
            payload=json.dumps({"role": "service", "node": self.name}).encode(),
            timeout=timeout,
        )
        if response.flags & FLAG_ERROR_RESPONSE:
            raise _services.DuplicateServiceError(response.payload.decode("utf-8", errors="replace"))

    def _unregister_service(self, server: _services.ServiceServer) -> None:
        with self._lock:
            self._services.pop(server.name, None)
        self._executor.remove_entity(server.entity)
        try:
            self._control_request(
                FrameKind.ADVERTISE,
                topic=server.name,
                payload=json.dumps({"role": "service", "node": self.name, "remove": True}).encode(),
                timeout=2.0,
            )
        except (TransportError, NodeError):
            pass

    # -- actions -------------------------------------------------------------------

    def create_action_server(self, name: str, handler, **kwargs) -> _actions.ActionServer:
        return _actions.create_action_server(self, name, handler, **kwargs)

    def send_goal(self, name: str, goal: Any, feedback_callback=None,
                  timeout: float = _actions.DEFAULT_GOAL_TIMEOUT) -> _actions.ClientGoalHandle:
        return _actions.send_goal(self, name, goal, feedback_callback, timeout)

    def cancel_goal(self, handle: _actions.ClientGoalHandle, name: str) -> None:
        _actions.cancel_goal(self, handle, name)

    def _register_action(self, server: _actions.ActionServer, timeout: float) -> None:
        self._register_action_frame(server.name, timeout=timeout)
        with self._lock:
            self._action_servers[server.name] = server

    def _register_action_frame(self, name: str, timeout: float) -> None:
        response = self._control_request(
            FrameKind.ADVERTISE,
            topic=name,
            payload=json.dumps({"role": "action", "node": self.name}).encode(),
            timeout=timeout,
        )
        if response.flags & FLAG_ERROR_RESPONSE:
            raise _services.DuplicateServiceError(response.payload.decode("utf-8", errors="replace"))

    def _unregister_action_server(self, server: _actions.ActionServer) -> None:
        with self._lock:
            self._action_servers.pop(server.name, None)
        self._executor.remove_entity(server.entity)
        try:
            self._control_request(
                FrameKind.ADVERTISE,
                topic=server.name,
                payload=json.dumps({"role": "action", "node": self.name, "remove": True}).encode(),
                timeout=2.0,
            )
        except (TransportError, NodeError):
            pass

    def _register_goal(self, handle: _actions.ClientGoalHandle) -> None:
        with self._lock:
            self._goals[handle.goal_id] = handle

    def _drop_goal(self, handle: _actions.ClientGoalHandle) -> None:
        with self._lock:
            self._goals.pop(handle.goal_id, None)
        self._executor.remove_entity(handle._entity)

    def _schedule_goal_timeout(self, handle: _actions.ClientGoalHandle, name: str, timeout: float) -> None:
        def fire() -> None:
            if handle.time_out():
                # best-effort cancel so the server stops working on it
                try:
                    _actions.cancel_goal(self, handle, name)
                except Exception:
                    pass
                self._drop_goal(handle)

        self._deadline.schedule(timeout, fire)

    # -- parameters -------------------------------------------------------------

    def declare_parameter(self, decl: ParameterDecl) -> None:
        self._validate_param_value(decl, decl.default)
        with self._lock:
            if decl.name in self._params:
                raise ParameterError(f"parameter {decl.name!r} already declared")
            self._params[decl.name] = _Param(decl, decl.default)
        self._ensure_param_services()

    def get_parameter(self, name: str) -> Any:
        with self._lock:
            param = self._params.get(name)
            if param is None:
                raise UnknownParameterError(name)
            return param.value

    def set_parameter(self, name: str, value: Any) -> None:
        with self._lock:
            param = self._params.get(name)
            if param is None:
                raise UnknownParameterError(name)
            self._validate_param_value(param.decl, value)
            param.value = value

    def list_parameters(self) -> list[str]:
        with self._lock:
            return sorted(self._params)

    @staticmethod
    def _validate_param_value(decl: ParameterDecl, value: Any) -> None:
        payload_type, _ = encode_typed_payload(value)
        if payload_type != decl.type:
            raise ParameterTypeError(
                f"parameter {decl.name!r} is {decl.type.name}, value encodes as {payload_type.name}"
            )
        if decl.validator is not None and not decl.validator(value):
            raise ParameterValidationError(f"value {value!r} rejected by validator for {decl.name!r}")

    def _ensure_param_services(self) -> None:
        with self._lock:
            if self._param_services_up:
                return
            self._param_services_up = True
        prefix = f"{RESERVED_PREFIX}param/{self.name}"
        self.create_service(f"{prefix}/get", PayloadType.STRING_UTF8, None,
                            self._param_get_handler, _internal=True)
        self.create_service(f"{prefix}/set", PayloadType.BYTES, None,
                            self._param_set_handler, _internal=True)
        self.create_service(f"{prefix}/list", PayloadType.NULL, PayloadType.STRING_UTF8,
                            self._param_list_handler, _internal=True)

    def _param_get_handler(self, name: str) -> Any:
        return self.get_parameter(name)

    def _param_set_handler(self, request: bytes) -> Any:
        name, value = decode_param_set(request)
        self.set_parameter(name, value)
        return self.get_parameter(name)

    def _param_list_handler(self, _request: None) -> str:
        with self._lock:
            entries = [
                {"name": name, "type": param.decl.type.name, "value": param.value}
                for name, param in sorted(self._params.items())
            ]
        return json.dumps(entries)

    def get_remote_parameter(self, node_name: str, name: str, timeout: float = 5.0) -> Any:
        return self.call(f"{RESERVED_PREFIX}param/{node_name}/get", name, timeout)

    def set_remote_parameter(self, node_name: str, name: str, value: Any, timeout: float = 5.0) -> Any:
        return self.call(f"{RESERVED_PREFIX}param/{node_name}/set", encode_param_set(name, value), timeout)

    def list_remote_parameters(self, node_name: str, timeout: float = 5.0) -> list[dict]:
        return json.loads(self.call(f"{RESERVED_PREFIX}param/{node_name}/list", None, timeout))

    # -- timers / rate --------------------------------------------------------------

    def create_rate(self, period: float) -> RateController:
        return RateController(period)

    def create_timer(self, period: float, callback: Callable[[], None], *, weight: int = 1024) -> _Timer:
        if period <= 0:
            raise ValueError("period must be positive")
        entity = self._executor.create_entity(weight=weight, name=f"timer:{period}s")
        rate = RateController(period)
        executor_timer = self._executor.add_timer(entity, callback, rate)
        return _Timer(self, executor_timer, entity)

    # -- introspection / spinning ----------------------------------------------------

    def graph_info(self, timeout: float = 5.0) -> dict:
        response = self._control_request(FrameKind.INFO_REQ, topic="", payload=b"", timeout=timeout)
        return json.loads(response.payload.decode("utf-8"))

    def spin(self, duration: Optional[float] = None, stop: Optional[Callable[[], bool]] = None):
        return self._executor.spin(duration=duration, stop=stop)

    def spin_in_background(self) -> Callable[[], None]:
        """Start a spin thread; returns a function that stops and joins it."""
        stop_event = threading.Event()
        thread = threading.Thread(
            target=self._executor.spin, kwargs={"stop": stop_event.is_set},
            name=f"{self.name}-spin", daemon=True,
        )
        thread.start()

        def stop() -> None:
            stop_event.set()
            thread.join(timeout=5.0)

        return stop

    def close(self) -> None:
        if self._closing:
            return
        self._closing = True
        self._deadline.close()
        try:
            self._conn.close()
        except Exception:
            pass
        if self._owns_executor:
            self._executor.shutdown()

    def __enter__(self) -> "Node":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _validate_node_name(name: str) -> None:
    if not name:
        raise NodeError("node name must be nonempty")
    if name.startswith("/"):
        raise NodeError("node name must not start with '/'")
    if any(ch.isspace() for ch in name):
        raise NodeError("node name must not contain whitespace")


def encode_param_set(name: str, value: Any) -> bytes:
    """Set-request payload: u16 name length, name, type tag, typed value bytes."""
    name_bytes = name.encode("utf-8")
    payload_type, payload = encode_typed_payload(value)
    return _PARAM_SET.pack(len(name_bytes)) + name_bytes + bytes([payload_type]) + payload


def decode_param_set(data: bytes) -> tuple[str, Any]:
    if len(data) < 3:
        raise ParameterError("short set-parameter payload")
    (name_len,) = _PARAM_SET.unpack_from(data)
    name_end = 2 + name_len
    if len(data) < name_end + 1:
        raise ParameterError("short set-parameter payload")
    name = data[2:name_end].decode("utf-8")
    payload_type = PayloadType(data[name_end])
    value = decode_typed_payload(payload_type, data[name_end + 1 :])
    return name, value


# Operation-style aliases matching the rest of the package's free functions.
def advertise(node: Node, spec: TopicSpec, **kwargs) -> Publisher:
    return node.advertise(spec, **kwargs)


def subscribe(node: Node, spec: TopicSpec, callback: Callable, **kwargs) -> Subscription:
    return node.subscribe(spec, callback, **kwargs)


def rate_sleep(rate: RateController, now_ns: Optional[int] = None) -> int:
    """Sleep to the rate's next deadline; see :meth:`RateController.sleep`."""
    return rate.sleep(now_ns)


def create_timer(node: Node, period: float, callback: Callable[[], None], **kwargs) -> _Timer:
    return node.create_timer(period, callback, **kwargs)


def declare_parameter(node: Node, decl: ParameterDecl) -> None:
    node.declare_parameter(decl)
