"""Goal-oriented tasks: periodic feedback, cooperative cancellation, one result.

A goal travels as an ACTION_GOAL frame whose correlation field is the
goal id; feedback and the single terminal result come back tagged with
the same id, so concurrent goals demultiplex cleanly.  Cancellation is
cooperative: the server flips a flag the handler is expected to poll
(or observe between yields, for generator handlers).

The result frame packs one byte of terminal state ahead of the typed
result payload.
"""

from __future__ import annotations

import inspect
import threading
import time
from enum import IntEnum
from typing import Any, Callable, Optional

from metaros.envelope import (
    Frame,
    FrameKind,
    PayloadType,
    decode_typed_payload,
    encode_typed_payload,
)
from metaros.services import CompletionState, CompletionToken

DEFAULT_GOAL_TIMEOUT = 30.0


class ActionError(Exception):
    pass


class IllegalTransitionError(ActionError):
    pass


class FeedbackAfterTerminalError(ActionError):
    pass


class ActionCanceled(Exception):
    """Raise from a handler to finish a goal as CANCELED.

    Carries an optional result value.
    """

    def __init__(self, result: Any = None):
        super().__init__("goal canceled")
        self.result = result


class GoalState(IntEnum):
    PENDING = 0
    ACTIVE = 1
    CANCELING = 2
    SUCCEEDED = 3
    ABORTED = 4
    CANCELED = 5


TERMINAL_STATES = frozenset({GoalState.SUCCEEDED, GoalState.ABORTED, GoalState.CANCELED})

# The complete legal transition relation; anything absent is illegal.
LEGAL_TRANSITIONS = frozenset(
    {
        (GoalState.PENDING, GoalState.ACTIVE),
        (GoalState.PENDING, GoalState.CANCELED),
        (GoalState.ACTIVE, GoalState.SUCCEEDED),
        (GoalState.ACTIVE, GoalState.ABORTED),
        (GoalState.ACTIVE, GoalState.CANCELING),
        (GoalState.CANCELING, GoalState.CANCELED),
        (GoalState.CANCELING, GoalState.SUCCEEDED),
        (GoalState.CANCELING, GoalState.ABORTED),
    }
)


class GoalRecord:
    """Server-side identity and state of one goal."""

    __slots__ = ("goal_id", "_state", "feedback_seq", "result", "_lock")

    def __init__(self, goal_id: bytes):
        self.goal_id = goal_id
        self._state = GoalState.PENDING
        self.feedback_seq = 0
        self.result: Any = None
        self._lock = threading.Lock()

    @property
    def state(self) -> GoalState:
        return self._state

    def transition(self, target: GoalState) -> GoalState:
        """Move to ``target`` if legal, else raise IllegalTransitionError."""
        with self._lock:
            if (self._state, target) not in LEGAL_TRANSITIONS:
                raise IllegalTransitionError(f"{self._state.name} -> {target.name}")
            self._state = target
            return target

    def try_transition(self, target: GoalState) -> bool:
        with self._lock:
            if (self._state, target) not in LEGAL_TRANSITIONS:
                return False
            self._state = target
            return True

    @property
    def terminal(self) -> bool:
        return self._state in TERMINAL_STATES


def pack_result(state: GoalState, value: Any) -> tuple[PayloadType, bytes]:
    payload_type, payload = encode_typed_payload(value)
    return payload_type, bytes([state]) + payload


def unpack_result(payload_type: PayloadType, payload: bytes) -> tuple[GoalState, Any]:
    if not payload:
        raise ActionError("empty result payload")
    state = GoalState(payload[0])
    return state, decode_typed_payload(payload_type, payload[1:])


class ServerGoalHandle:
    """What an action handler sees: the goal value, feedback, cancel flag."""

    def __init__(self, server: "ActionServer", record: GoalRecord, goal: Any):
        self._server = server
        self._record = record
        self.goal = goal
        self._cancel_requested = threading.Event()

    @property
    def cancel_requested(self) -> bool:
        return self._cancel_requested.is_set()

    @property
    def state(self) -> GoalState:
        return self._record.state

    def publish_feedback(self, value: Any) -> None:
        record = self._record
        if record.state not in (GoalState.ACTIVE, GoalState.CANCELING):
            raise FeedbackAfterTerminalError(f"goal is {record.state.name}")
        record.feedback_seq += 1
        payload_type, payload = encode_typed_payload(value)
        self._server.node._send_frame(
            Frame(
                FrameKind.ACTION_FEEDBACK,
                payload_type,
                0,
                record.feedback_seq,
                time.time_ns(),
                self._server.name,
                record.goal_id,
                payload,
            ),
            best_effort=True,
        )


class ActionServer:
    """Executes goals for one action name.

    Handlers may be plain callables (run to completion in one executor
    work item) or generator functions, which are resumed one step per
    work item so concurrent goals interleave under the executor's
    scheduling.  Return value resolves the goal SUCCEEDED; raising
    :class:`ActionCanceled` resolves CANCELED; any other exception
    ABORTED.
    """

    def __init__(self, node, name: str, handler: Callable[[ServerGoalHandle], Any],
                 *, weight: int = 1024):
        self.node = node
        self.name = name
        self.handler = handler
        self._is_generator = inspect.isgeneratorfunction(handler)
        self.entity = node._executor.create_entity(weight=weight, name=f"action:{name}")
        self._goals: dict[bytes, tuple[GoalRecord, ServerGoalHandle]] = {}
        self._lock = threading.Lock()
        self._closed = False

    # -- transport-side entry points (dispatch thread) ---------------------

    def _handle_goal(self, frame: Frame) -> None:
        record = GoalRecord(frame.correlation)
        try:
            goal_value = decode_typed_payload(frame.payload_type, frame.payload)
        except Exception as exc:
            record.transition(GoalState.CANCELED)
            self._send_result(record, GoalState.CANCELED, f"undecodable goal: {exc}")
            return
        handle = ServerGoalHandle(self, record, goal_value)
        with self._lock:
            self._goals[frame.correlation] = (record, handle)
        self.node._executor.submit(self.entity, lambda: self._start(record, handle))

    def _handle_cancel(self, frame: Frame) -> None:
        with self._lock:
            entry = self._goals.get(frame.correlation)
        if entry is None:
            return
        record, handle = entry
        handle._cancel_requested.set()
        if record.try_transition(GoalState.CANCELING):
            return
        # PENDING goals cancel immediately; the handler never runs.
        if record.state is GoalState.PENDING and record.try_transition(GoalState.CANCELED):
            self._finish(record, GoalState.CANCELED, None)

    # -- executor work ------------------------------------------------------

    def _start(self, record: GoalRecord, handle: ServerGoalHandle) -> None:
        if record.terminal:  # canceled while pending
            return
        if not record.try_transition(GoalState.ACTIVE):
            return
        if not self._is_generator:
            self._run_step(record, handle, None)
            return
        try:
            gen = self.handler(handle)
        except ActionCanceled as exc:
            self._conclude(record, GoalState.CANCELED, exc.result)
            return
        except Exception as exc:
            self._conclude(record, GoalState.ABORTED, str(exc))
            return
        self._step_generator(record, handle, gen)

    def _run_step(self, record: GoalRecord, handle: ServerGoalHandle, _unused) -> None:
        try:
            result = self.handler(handle)
        except ActionCanceled as exc:
            self._conclude(record, GoalState.CANCELED, exc.result)
        except Exception as exc:
            self._conclude(record, GoalState.ABORTED, str(exc))
        else:
            self._conclude(record, GoalState.SUCCEEDED, result)

    def _step_generator(self, record: GoalRecord, handle: ServerGoalHandle, gen) -> None:
        try:
            next(gen)
        except StopIteration as stop:
            self._conclude(record, GoalState.SUCCEEDED, stop.value)
            return
        except ActionCanceled as exc:
            self._conclude(record, GoalState.CANCELED, exc.result)
            return
        except Exception as exc:
            self._conclude(record, GoalState.ABORTED, str(exc))
            return
        # One yield per work item: concurrent goals share the executor fairly.
        self.node._executor.submit(self.entity, lambda: self._step_generator(record, handle, gen))

    def _conclude(self, record: GoalRecord, state: GoalState, result: Any) -> None:
        if not record.try_transition(state):
            return  # already terminal (e.g. canceled-while-pending race)
        self._finish(record, state, result)

    def _finish(self, record: GoalRecord, state: GoalState, result: Any) -> None:
        record.result = result
        self._send_result(record, state, result)
        with self._lock:
            self._goals.pop(record.goal_id, None)

    def _send_result(self, record: GoalRecord, state: GoalState, result: Any) -> None:
        # Terminal state rides in the payload's first byte; the error flag
        # on ACTION_RESULT frames is reserved to the broker (unknown action).
        try:
            payload_type, payload = pack_result(state, result)
        except Exception:
            payload_type, payload = pack_result(state, str(result))
        self.node._send_frame(
            Frame(
                FrameKind.ACTION_RESULT,
                payload_type,
                0,
                record.feedback_seq,
                time.time_ns(),
                self.name,
                record.goal_id,
                payload,
            ),
            best_effort=True,
        )

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.node._unregister_action_server(self)


class ClientGoalHandle(CompletionToken):
    """Client view of one goal: a completion token plus the feedback stream.

    Resolves READY with ``(GoalState, result)``; feedback callbacks run
    on the client executor in feedback_seq order, never after the
    result.
    """

    def __init__(self, correlation: bytes, feedback_callback: Optional[Callable[[Any], None]],
                 entity, node):
        super().__init__(correlation)
        self.feedback_callback = feedback_callback
        self._entity = entity
        self._node = node
        self._last_feedback_seq = 0
        self.feedback_dropped = 0
        self.cancel_sent = False

    @property
    def goal_id(self) -> bytes:
        return self.correlation

    @property
    def goal_state(self) -> Optional[GoalState]:
        if self.state is not CompletionState.READY:
            return None
        return self.result[0]

    def _offer_feedback(self, frame: Frame) -> None:
        """Dispatch thread: order-filter then queue the callback."""
        if self.done:
            return
        if frame.sequence <= self._last_feedback_seq:
            self.feedback_dropped += 1  # regression or duplicate
            return
        self._last_feedback_seq = frame.sequence
        if self.feedback_callback is None:
            return
        try:
            value = decode_typed_payload(frame.payload_type, frame.payload)
        except Exception:
            self.feedback_dropped += 1
            return
        self._node._executor.submit(self._entity, lambda: self._fire_feedback(value))

    def _fire_feedback(self, value: Any) -> None:
        if self.done:
            return  # result already reached the application
        self.feedback_callback(value)

    def _offer_result(self, frame: Frame) -> None:
        """Dispatch thread: resolve via the executor so queued feedback
        drains first (per-goal FIFO)."""
        self._node._executor.submit(self._entity, lambda: self._apply_result(frame))

    def _apply_result(self, frame: Frame) -> None:
        from metaros.envelope import FLAG_ERROR_RESPONSE

        if frame.flags & FLAG_ERROR_RESPONSE:
            self.fail(frame.payload.decode("utf-8", errors="replace"))
            self._node._drop_goal(self)
            return
        try:
            state, value = unpack_result(frame.payload_type, frame.payload)
        except Exception as exc:
            self.fail(f"undecodable result: {exc}")
        else:
            self.resolve((state, value))
        self._node._drop_goal(self)


def create_action_server(node, name: str, handler: Callable[[ServerGoalHandle], Any],
                         *, timeout: float = 5.0, _internal: bool = False) -> ActionServer:
    """Register an action server; one live registrant per name."""
    node._check_name(name, _internal)
    server = ActionServer(node, name, handler)
    try:
        node._register_action(server, timeout=timeout)
    except Exception:
        node._executor.remove_entity(server.entity)
        raise
    return server


def send_goal(node, name: str, goal: Any,
              feedback_callback: Optional[Callable[[Any], None]] = None,
              timeout: float = DEFAULT_GOAL_TIMEOUT) -> ClientGoalHandle:
    """Submit a goal; returns immediately with the goal handle."""
    payload_type, payload = encode_typed_payload(goal)
    goal_id = node._new_correlation()
    entity = node._executor.create_entity(name=f"goal:{name}")
    handle = ClientGoalHandle(goal_id, feedback_callback, entity, node)
    node._register_goal(handle)
    frame = Frame(
        FrameKind.ACTION_GOAL,
        payload_type,
        0,
        node._next_call_seq(),
        time.time_ns(),
        name,
        goal_id,
        payload,
    )
    node._schedule_goal_timeout(handle, name, timeout)
    node._send_frame(frame, best_effort=True)
    return handle


def cancel_goal(node, handle: ClientGoalHandle, name: str) -> None:
    """Request cooperative cancellation; idempotent, resolution arrives
    through the goal handle."""
    if handle.done:
        return
    handle.cancel_sent = True
    node._send_frame(
        Frame(
            FrameKind.ACTION_CANCEL,
            PayloadType.NULL,
            0,
            node._next_call_seq(),
            time.time_ns(),
            name,
            handle.goal_id,
            b"",
        ),
        best_effort=True,
    )
