"""Request/response calls with non-blocking clients.

A call sends one SVC_REQ frame carrying a fresh 16-byte correlation id
and returns a :class:`CompletionToken` immediately.  The response is
matched strictly by correlation id, never arrival order, so any number
of calls may be in flight at once.  Only :func:`token_wait` blocks.
"""

from __future__ import annotations

import threading
import time
from enum import Enum
from typing import Any, Callable, Optional

from metaros.envelope import (
    FLAG_ERROR_RESPONSE,
    Frame,
    FrameKind,
    PayloadType,
    decode_typed_payload,
    encode_typed_payload,
)

DEFAULT_CALL_TIMEOUT = 5.0


class ServiceError(Exception):
    pass


class DuplicateServiceError(ServiceError):
    pass


class CompletionState(Enum):
    PENDING = "pending"
    READY = "ready"
    FAILED = "failed"
    TIMED_OUT = "timed_out"


class CompletionToken:
    """Resolution slot for one in-flight request.

    Transitions once, PENDING to exactly one of READY / FAILED /
    TIMED_OUT; every waiter observes the same terminal state.
    """

    def __init__(self, correlation: bytes, deadline: Optional[float] = None):
        self.correlation = correlation
        self.deadline = deadline
        self._lock = threading.Lock()
        self._event = threading.Event()
        self._state = CompletionState.PENDING
        self.result: Any = None
        self.error: Optional[str] = None

    @property
    def state(self) -> CompletionState:
        return self._state

    @property
    def done(self) -> bool:
        return self._state is not CompletionState.PENDING

    def _transition(self, state: CompletionState, result: Any = None,
                    error: Optional[str] = None) -> bool:
        with self._lock:
            if self._state is not CompletionState.PENDING:
                return False
            self._state = state
            self.result = result
            self.error = error
        self._event.set()
        return True

    def resolve(self, result: Any) -> bool:
        return self._transition(CompletionState.READY, result=result)

    def fail(self, error: str) -> bool:
        return self._transition(CompletionState.FAILED, error=error)

    def time_out(self) -> bool:
        return self._transition(CompletionState.TIMED_OUT, error="timed out")

    def wait(self, max_wait: Optional[float] = None) -> CompletionState:
        """Block until terminal or ``max_wait`` elapses; returns the state seen."""
        self._event.wait(max_wait)
        return self._state


def token_wait(token: CompletionToken, max_wait: Optional[float] = None) -> CompletionState:
    """Blocking wait on a token; the only blocking operation in this module."""
    return token.wait(max_wait)


class ServiceServer:
    """Server side of one named service; the handler runs as executor work."""

    def __init__(self, node, name: str, request_type: PayloadType,
                 response_type: Optional[PayloadType], handler: Callable[[Any], Any],
                 *, weight: int = 1024):
        self.node = node
        self.name = name
        self.request_type = request_type
        self.response_type = response_type
        self.handler = handler
        self.entity = node._executor.create_entity(weight=weight, name=f"svc:{name}")
        self._seq = 0
        self.requests = 0
        self.errors = 0
        self._closed = False

    def _handle_request(self, frame: Frame) -> None:
        """Transport thread: queue the handler invocation."""
        self.node._executor.submit(self.entity, lambda: self._invoke(frame))

    def _invoke(self, frame: Frame) -> None:
        self.requests += 1
        self._seq += 1
        sequence = self._seq
        try:
            if frame.payload_type != self.request_type:
                raise ServiceError(
                    f"request type {PayloadType(frame.payload_type).name}, "
                    f"expected {PayloadType(self.request_type).name}"
                )
            value = decode_typed_payload(frame.payload_type, frame.payload)
            result = self.handler(value)
            payload_type, payload = encode_typed_payload(result)
            if self.response_type is not None and payload_type != self.response_type:
                raise ServiceError(
                    f"handler returned {PayloadType(payload_type).name}, "
                    f"declared {PayloadType(self.response_type).name}"
                )
            flags = 0
        except Exception as exc:
            self.errors += 1
            payload_type, payload = PayloadType.STRING_UTF8, str(exc).encode("utf-8")
            flags = FLAG_ERROR_RESPONSE
        response = Frame(
            FrameKind.SVC_RESP,
            payload_type,
            flags,
            sequence,
            time.time_ns(),
            self.name,
            frame.correlation,
            payload,
        )
        self.node._send_frame(response, best_effort=True)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.node._unregister_service(self)


def create_service(node, name: str, request_type: PayloadType,
                   response_type: Optional[PayloadType], handler: Callable[[Any], Any],
                   *, timeout: float = 5.0, _internal: bool = False) -> ServiceServer:
    """Register a request handler under ``name`` on the node's broker.

    Raises :class:`DuplicateServiceError` if another live connection
    already owns the name.
    """
    node._check_name(name, _internal)
    server = ServiceServer(node, name, request_type, response_type, handler)
    try:
        node._register_service(server, timeout=timeout)
    except Exception:
        node._executor.remove_entity(server.entity)
        raise
    return server


def call_async(node, name: str, request: Any,
               timeout: float = DEFAULT_CALL_TIMEOUT) -> CompletionToken:
    """Send one request; returns immediately with a pending token.

    The token resolves READY with the decoded response, FAILED on a
    routing or handler error, or TIMED_OUT if nothing arrives in time.
    """
    payload_type, payload = encode_typed_payload(request)
    correlation = node._new_correlation()
    token = CompletionToken(correlation, deadline=time.monotonic() + timeout)
    node._register_call(token)
    frame = Frame(
        FrameKind.SVC_REQ,
        payload_type,
        0,
        node._next_call_seq(),
        time.time_ns(),
        name,
        correlation,
        payload,
    )
    node._schedule_call_timeout(token, timeout)
    node._send_frame(frame, best_effort=True)
    return token


def resolve_from_response(token: CompletionToken, frame: Frame) -> None:
    """Apply a SVC_RESP frame to its token."""
    if frame.flags & FLAG_ERROR_RESPONSE:
        try:
            message = frame.payload.decode("utf-8", errors="replace")
        except Exception:
            message = "remote error"
        token.fail(message)
        return
    try:
        value = decode_typed_payload(frame.payload_type, frame.payload)
    except Exception as exc:
        token.fail(f"undecodable response: {exc}")
        return
    token.resolve(value)
