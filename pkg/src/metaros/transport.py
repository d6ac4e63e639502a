"""Frame transports: in-process loopback, TCP client, and fault injection.

A connection moves whole frames in both directions.  Frames are
self-delimiting on the wire (the header declares both variable lengths),
so the TCP stream carries raw concatenated encodings with no outer
length prefix.

Inbound delivery has two modes: pull (:meth:`Connection.recv_frame`) or
push (:meth:`Connection.set_receiver`).  Push mode is what nodes use; the
callback runs on the transport's delivering thread and must not block.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from metaros.envelope import CodecError, Frame, FrameKind, FrameStreamDecoder, encode_frame

log = logging.getLogger(__name__)

DEFAULT_TCP_PORT = 7447


class TransportError(Exception):
    pass


class ConnectError(TransportError):
    pass


class ConnectionClosedError(TransportError):
    pass


@dataclass(frozen=True)
class EndpointAddress:
    """Where a broker lives: ``inproc://<registry-key>`` or ``tcp://host:port``."""

    scheme: str
    target: str

    @classmethod
    def parse(cls, text: "str | EndpointAddress") -> "EndpointAddress":
        if isinstance(text, EndpointAddress):
            return text
        if "://" not in text:
            raise ValueError(f"address {text!r} needs an inproc:// or tcp:// scheme")
        scheme, _, target = text.partition("://")
        if scheme == "inproc":
            if not target:
                raise ValueError("inproc address needs a registry key")
            return cls("inproc", target)
        if scheme == "tcp":
            host, _, port_text = target.rpartition(":")
            if not host:
                raise ValueError(f"tcp address {text!r} needs host:port")
            port = int(port_text)
            if not 1 <= port <= 65535:
                raise ValueError(f"port {port} out of range")
            return cls("tcp", target)
        raise ValueError(f"unknown scheme {scheme!r}")

    @property
    def host(self) -> str:
        return self.target.rpartition(":")[0]

    @property
    def port(self) -> int:
        return int(self.target.rpartition(":")[2])

    def __str__(self) -> str:
        return f"{self.scheme}://{self.target}"


class Connection:
    """Full-duplex ordered frame stream; base for all transports.

    ``send_frame`` is safe for concurrent callers.  Receiving is
    single-consumer: either poll ``recv_frame`` or install a receiver
    callback, not both at once.
    """

    def __init__(self) -> None:
        self._rx_lock = threading.Lock()
        self._rx_queue: deque[Frame] = deque()
        self._rx_ready = threading.Condition(self._rx_lock)
        self._receiver: Optional[Callable[[Frame], None]] = None
        self._on_close: Optional[Callable[[Optional[Exception]], None]] = None
        self._closed = False
        self._close_error: Optional[Exception] = None

    # -- receive side ----------------------------------------------------

    def set_receiver(
        self,
        on_frame: Callable[[Frame], None],
        on_close: Optional[Callable[[Optional[Exception]], None]] = None,
    ) -> None:
        """Switch to push delivery; any queued frames are flushed in order."""
        with self._rx_lock:
            backlog = list(self._rx_queue)
            self._rx_queue.clear()
            self._receiver = on_frame
            self._on_close = on_close
            already_closed = self._closed
            error = self._close_error
        for frame in backlog:
            on_frame(frame)
        if already_closed and on_close is not None:
            on_close(error)

    def recv_frame(self, timeout: Optional[float] = None) -> Optional[Frame]:
        """Next inbound frame, or None on timeout; raises once closed and drained."""
        deadline = time.monotonic() + timeout if timeout is not None else None
        with self._rx_ready:
            while not self._rx_queue:
                if self._closed:
                    raise ConnectionClosedError(str(self._close_error or "connection closed"))
                if deadline is None:
                    self._rx_ready.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return None
                    self._rx_ready.wait(remaining)
            return self._rx_queue.popleft()

    def _deliver(self, frame: Frame) -> None:
        receiver = self._receiver  # installed once, before traffic flows
        if receiver is None:
            with self._rx_lock:
                receiver = self._receiver
                if receiver is None:
                    self._rx_queue.append(frame)
                    self._rx_ready.notify()
                    return
        try:
            receiver(frame)
        except Exception:
            log.exception("receiver callback raised; frame dropped")

    def _mark_closed(self, error: Optional[Exception] = None) -> None:
        with self._rx_lock:
            if self._closed:
                return
            self._closed = True
            self._close_error = error
            on_close = self._on_close
            self._rx_ready.notify_all()
        if on_close is not None:
            try:
                on_close(error)
            except Exception:
                log.exception("on_close callback raised")

    # -- to be provided by transports -------------------------------------

    def send_frame(self, frame: Frame) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    @property
    def closed(self) -> bool:
        return self._closed


# -- in-process transport -------------------------------------------------

_inproc_lock = threading.Lock()
_inproc_registry: dict[str, object] = {}


def register_inproc(name: str, broker: object) -> None:
    with _inproc_lock:
        if name in _inproc_registry:
            raise ConnectError(f"inproc endpoint {name!r} already bound")
        _inproc_registry[name] = broker


def unregister_inproc(name: str, broker: object) -> None:
    with _inproc_lock:
        if _inproc_registry.get(name) is broker:
            del _inproc_registry[name]


def _lookup_inproc(name: str) -> object:
    with _inproc_lock:
        try:
            return _inproc_registry[name]
        except KeyError:
            raise ConnectError(f"no inproc broker registered as {name!r}") from None


class InprocConnection(Connection):
    """Loopback endpoint attached directly to an in-process broker.

    Frames cross as objects, not bytes; the codec is exercised by the
    envelope suite and the TCP transport.
    """

    def __init__(self, handle_frame: Callable[["InprocConnection", Frame], None],
                 on_detach: Callable[["InprocConnection"], None]):
        super().__init__()
        self._handle_frame = handle_frame
        self._on_detach = on_detach

    def send_frame(self, frame: Frame) -> None:
        if self._closed:
            raise ConnectionClosedError("connection closed")
        self._handle_frame(self, frame)

    def close(self) -> None:
        if self._closed:
            return
        self._mark_closed()
        self._on_detach(self)


# -- TCP transport ----------------------------------------------------------

_SEND_BATCH_BYTES = 256 * 1024


class TcpConnection(Connection):
    """One side of a TCP frame stream; owns a reader and a writer thread."""

    def __init__(self, sock: socket.socket, name: str = "tcp"):
        super().__init__()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._name = name
        self._tx_lock = threading.Lock()
        self._tx_ready = threading.Condition(self._tx_lock)
        self._tx_queue: deque[bytes] = deque()
        self._tx_closing = False
        self._reader = threading.Thread(target=self._read_loop, name=f"{name}-rx", daemon=True)
        self._writer = threading.Thread(target=self._write_loop, name=f"{name}-tx", daemon=True)
        self._reader.start()
        self._writer.start()

    def send_frame(self, frame: Frame) -> None:
        data = encode_frame(frame)  # encode on the caller so errors surface here
        with self._tx_ready:
            if self._closed or self._tx_closing:
                raise ConnectionClosedError("connection closed")
            self._tx_queue.append(data)
            self._tx_ready.notify()

    def _write_loop(self) -> None:
        try:
            while True:
                with self._tx_ready:
                    while not self._tx_queue and not self._tx_closing:
                        self._tx_ready.wait()
                    if self._tx_closing and not self._tx_queue:
                        return
                    chunks: list[bytes] = []
                    size = 0
                    while self._tx_queue and size < _SEND_BATCH_BYTES:
                        chunk = self._tx_queue.popleft()
                        chunks.append(chunk)
                        size += len(chunk)
                self._sock.sendall(b"".join(chunks))
        except OSError as exc:
            self._shutdown(exc)

    def _read_loop(self) -> None:
        decoder = FrameStreamDecoder()
        try:
            while True:
                chunk = self._sock.recv(65536)
                if not chunk:
                    self._shutdown(None)
                    return
                for frame in decoder.feed(chunk):
                    self._deliver(frame)
        except CodecError as exc:
            log.warning("%s: mid-stream decode error, closing: %s", self._name, exc)
            self._shutdown(exc)
        except OSError as exc:
            self._shutdown(exc)

    def _shutdown(self, error: Optional[Exception]) -> None:
        with self._tx_ready:
            self._tx_closing = True
            self._tx_ready.notify_all()
        try:
            self._sock.close()
        except OSError:
            pass
        self._mark_closed(error)

    def close(self) -> None:
        # Give the writer a moment to drain, then tear down.
        with self._tx_ready:
            self._tx_closing = True
            self._tx_ready.notify_all()
        deadline = time.monotonic() + 1.0
        while time.monotonic() < deadline:
            with self._tx_lock:
                if not self._tx_queue:
                    break
            time.sleep(0.005)
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._shutdown(None)


def connect(address: "str | EndpointAddress", timeout: float = 5.0) -> Connection:
    """Open a connection to a broker endpoint."""
    address = EndpointAddress.parse(address)
    if address.scheme == "inproc":
        broker = _lookup_inproc(address.target)
        return broker.attach()  # type: ignore[attr-defined]
    try:
        sock = socket.create_connection((address.host, address.port), timeout=timeout)
    except OSError as exc:
        raise ConnectError(f"cannot connect to {address}: {exc}") from exc
    sock.settimeout(None)
    return TcpConnection(sock, name=f"tcp:{address.target}")


# -- fault injection ---------------------------------------------------------


@dataclass(frozen=True)
class FaultProfile:
    """Seeded loss/duplication/delay applied to a connection's outgoing frames.

    Randomness drawn per frame, in a fixed order so scenarios replay and
    external simulations of the same generator agree:

        u1 = rng.random()            # dropped if u1 < drop_probability
        u2 = rng.random()            # duplicated if u2 < duplicate_probability
        for each transmitted copy:
            d = rng.uniform(min_ms, max_ms)

    A dropped frame consumes only u1.
    """

    drop_probability: float = 0.0
    duplicate_probability: float = 0.0
    delay_range_ms: tuple[float, float] = (0.0, 0.0)
    seed: int = 0
    data_only: bool = False  # restrict faults to DATA frames, sparing control traffic

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability out of [0,1]")
        if not 0.0 <= self.duplicate_probability <= 1.0:
            raise ValueError("duplicate_probability out of [0,1]")
        lo, hi = self.delay_range_ms
        if lo < 0 or hi < lo:
            raise ValueError("delay_range_ms must satisfy 0 <= min <= max")


class FaultyConnection(Connection):
    """Wrapper applying a :class:`FaultProfile` to outgoing frames only."""

    def __init__(self, inner: Connection, profile: FaultProfile):
        super().__init__()
        self.inner = inner
        self.profile = profile
        self._rng = random.Random(profile.seed)
        self._rng_lock = threading.Lock()
        self._delay_lock = threading.Lock()
        self._delay_ready = threading.Condition(self._delay_lock)
        self._delayed: list[tuple[int, int, Frame]] = []
        self._delay_seq = itertools.count()
        self._stop = False
        self._worker: Optional[threading.Thread] = None
        self.sent = 0
        self.dropped = 0
        self.duplicated = 0

    def send_frame(self, frame: Frame) -> None:
        profile = self.profile
        if profile.data_only and frame.kind != FrameKind.DATA:
            self.inner.send_frame(frame)
            return
        with self._rng_lock:
            if self._rng.random() < profile.drop_probability:
                self.dropped += 1
                return
            copies = 1
            if self._rng.random() < profile.duplicate_probability:
                copies = 2
                self.duplicated += 1
            lo, hi = profile.delay_range_ms
            delays = [self._rng.uniform(lo, hi) for _ in range(copies)]
        for delay_ms in delays:
            self.sent += 1
            if delay_ms <= 0.0:
                self.inner.send_frame(frame)
            else:
                self._schedule(frame, delay_ms)

    def _schedule(self, frame: Frame, delay_ms: float) -> None:
        due = time.monotonic_ns() + int(delay_ms * 1e6)
        with self._delay_ready:
            if self._worker is None:
                self._worker = threading.Thread(target=self._delay_loop, name="fault-delay", daemon=True)
                self._worker.start()
            heapq.heappush(self._delayed, (due, next(self._delay_seq), frame))
            self._delay_ready.notify()

    def _delay_loop(self) -> None:
        while True:
            with self._delay_ready:
                while not self._delayed and not self._stop:
                    self._delay_ready.wait()
                if self._stop and not self._delayed:
                    return
                due, _, frame = self._delayed[0]
                now = time.monotonic_ns()
                if due > now:
                    self._delay_ready.wait((due - now) / 1e9)
                    continue
                heapq.heappop(self._delayed)
            try:
                self.inner.send_frame(frame)
            except TransportError:
                pass  # connection went away while the frame was in flight

    # Receive side passes straight through to the wrapped connection.

    def set_receiver(self, on_frame, on_close=None) -> None:  # type: ignore[override]
        self.inner.set_receiver(on_frame, on_close)

    def recv_frame(self, timeout: Optional[float] = None) -> Optional[Frame]:
        return self.inner.recv_frame(timeout)

    def close(self) -> None:
        with self._delay_ready:
            self._stop = True
            self._delayed.clear()
            self._delay_ready.notify_all()
        self.inner.close()
        self._mark_closed()

    @property
    def closed(self) -> bool:
        return self.inner.closed


def wrap_with_faults(connection: Connection, profile: FaultProfile) -> FaultyConnection:
    """Apply seeded drop/duplicate/delay faults to a connection's sends."""
    return FaultyConnection(connection, profile)
