"""The message broker: the routing hub every endpoint connects to.

Responsibilities: fan DATA frames out to every connection whose
subscription pattern matches, route service requests to their single
registered server and responses back by correlation id, do the same for
action goal/feedback/result/cancel traffic, acknowledge frames that ask
for it, answer graph introspection requests, and emit heartbeats.

The broker holds no message history: a DATA frame with no matching
subscriber is dropped.  Delivery guarantees live at the endpoints (see
``metaros.reliability``).
"""

from __future__ import annotations

import json
import logging
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from metaros.envelope import (
    FLAG_ERROR_RESPONSE,
    Frame,
    FrameKind,
    FrameStreamDecoder,
    CodecError,
    PayloadType,
    encode_frame,
)
from metaros import transport
from metaros.transport import EndpointAddress, InprocConnection

log = logging.getLogger(__name__)


def topic_matches(pattern: str, topic: str) -> bool:
    """True iff the pattern equals the topic, or the pattern ends in "/*"
    and its prefix (wildcard stripped) is a proper prefix of the topic."""
    if pattern == topic:
        return True
    if pattern.endswith("/*"):
        prefix = pattern[:-1]  # keep the slash
        return len(topic) > len(prefix) and topic.startswith(prefix)
    return False


@dataclass
class BrokerConfig:
    heartbeat_interval: float = 0.5
    name: str = "broker"


@dataclass
class _TopicAd:
    payload_type: int
    publishers: set[tuple[int, bytes]] = field(default_factory=set)


class _Peer:
    """Broker-side view of one connection."""

    __slots__ = ("id", "send", "close", "node_name", "alive")

    def __init__(self, peer_id: int, send, close):
        self.id = peer_id
        self.send = send
        self.close = close
        self.node_name: Optional[str] = None
        self.alive = True


class Broker:
    """Routing core, shared by the inproc and TCP front ends."""

    def __init__(self, config: BrokerConfig | None = None):
        self.config = config or BrokerConfig()
        self._lock = threading.RLock()
        self._peers: dict[int, _Peer] = {}
        self._next_peer_id = 1
        self._node_names: dict[str, int] = {}
        self._patterns: dict[str, dict[int, int]] = {}  # pattern -> peer id -> refcount
        self._peer_patterns: dict[int, dict[str, int]] = {}
        self._ads: dict[str, _TopicAd] = {}
        self._services: dict[str, int] = {}
        self._actions: dict[str, int] = {}
        self._svc_routes: dict[bytes, int] = {}
        self._goal_routes: dict[bytes, tuple[int, int]] = {}
        self._route_cache: dict[str, tuple[_Peer, ...]] = {}
        self._hb_seq = 0
        self._closed = False
        self.frames_routed = 0
        self.acks_sent = 0

    # -- peer lifecycle ---------------------------------------------------

    def add_peer(self, send, close) -> _Peer:
        with self._lock:
            peer = _Peer(self._next_peer_id, send, close)
            self._next_peer_id += 1
            self._peers[peer.id] = peer
            return peer

    def remove_peer(self, peer: _Peer) -> None:
        with self._lock:
            if not peer.alive:
                return
            peer.alive = False
            self._peers.pop(peer.id, None)
            if peer.node_name and self._node_names.get(peer.node_name) == peer.id:
                del self._node_names[peer.node_name]
            for pattern in self._peer_patterns.pop(peer.id, {}):
                refs = self._patterns.get(pattern)
                if refs is not None:
                    refs.pop(peer.id, None)
                    if not refs:
                        del self._patterns[pattern]
            for topic in list(self._ads):
                ad = self._ads[topic]
                ad.publishers = {p for p in ad.publishers if p[0] != peer.id}
                if not ad.publishers:
                    del self._ads[topic]
            for name in [n for n, pid in self._services.items() if pid == peer.id]:
                del self._services[name]
            for name in [n for n, pid in self._actions.items() if pid == peer.id]:
                del self._actions[name]
            self._svc_routes = {c: pid for c, pid in self._svc_routes.items() if pid != peer.id}
            self._goal_routes = {
                c: route for c, route in self._goal_routes.items() if peer.id not in route
            }
            self._route_cache.clear()

    # -- helpers -----------------------------------------------------------

    def _reply(self, peer: _Peer, kind: FrameKind, request: Frame, *,
               error: str | None = None, payload: bytes = b"",
               payload_type: PayloadType = PayloadType.NULL) -> None:
        flags = FLAG_ERROR_RESPONSE if error is not None else 0
        if error is not None:
            payload = error.encode("utf-8")
            payload_type = PayloadType.STRING_UTF8
        frame = Frame(
            kind,
            payload_type,
            flags,
            request.sequence,
            time.time_ns(),
            request.topic,
            request.correlation,
            payload,
        )
        self._send(peer, frame)

    def _send(self, peer: _Peer, frame: Frame) -> None:
        try:
            peer.send(frame)
        except Exception:
            log.debug("send to peer %d failed; dropping it", peer.id, exc_info=True)
            self.remove_peer(peer)

    def _targets_for(self, topic: str) -> tuple[_Peer, ...]:
        cached = self._route_cache.get(topic)
        if cached is not None:
            return cached
        ids = set()
        for pattern, refs in self._patterns.items():
            if topic_matches(pattern, topic):
                ids.update(refs)
        peers = tuple(self._peers[i] for i in ids if i in self._peers)
        self._route_cache[topic] = peers
        return peers

    # -- the router ---------------------------------------------------------

    def handle_frame(self, peer: _Peer, frame: Frame) -> None:
        kind = frame.kind
        if kind == FrameKind.DATA:
            with self._lock:
                targets = self._route_cache.get(frame.topic)
                if targets is None:
                    targets = self._targets_for(frame.topic)
                if frame.flags & 0x01:  # requires_ack: confirm receipt at the broker
                    self.acks_sent += 1
                    self._send(
                        peer,
                        Frame(
                            FrameKind.ACK,
                            PayloadType.NULL,
                            0,
                            frame.sequence,
                            time.time_ns(),
                            frame.topic,
                            frame.correlation,
                        ),
                    )
                self.frames_routed += 1
                for target in targets:
                    try:
                        target.send(frame)
                    except Exception:
                        log.debug("send to peer %d failed; dropping it", target.id, exc_info=True)
                        self.remove_peer(target)
            return
        if kind == FrameKind.SUB:
            with self._lock:
                refs = self._patterns.setdefault(frame.topic, {})
                refs[peer.id] = refs.get(peer.id, 0) + 1
                mine = self._peer_patterns.setdefault(peer.id, {})
                mine[frame.topic] = mine.get(frame.topic, 0) + 1
                self._route_cache.clear()
                self._reply(peer, FrameKind.SUB, frame)
            return
        if kind == FrameKind.UNSUB:
            with self._lock:
                refs = self._patterns.get(frame.topic)
                if refs and peer.id in refs:
                    refs[peer.id] -= 1
                    if refs[peer.id] <= 0:
                        del refs[peer.id]
                    if not refs:
                        del self._patterns[frame.topic]
                mine = self._peer_patterns.get(peer.id, {})
                if frame.topic in mine:
                    mine[frame.topic] -= 1
                    if mine[frame.topic] <= 0:
                        del mine[frame.topic]
                self._route_cache.clear()
                self._reply(peer, FrameKind.UNSUB, frame)
            return
        if kind == FrameKind.ADVERTISE:
            self._handle_advertise(peer, frame)
            return
        if kind == FrameKind.SVC_REQ:
            with self._lock:
                server_id = self._services.get(frame.topic)
                if server_id is None or server_id not in self._peers:
                    self._reply(peer, FrameKind.SVC_RESP, frame, error=f"no such service: {frame.topic}")
                    return
                self._svc_routes[frame.correlation] = peer.id
                self._send(self._peers[server_id], frame)
            return
        if kind == FrameKind.SVC_RESP:
            with self._lock:
                requester_id = self._svc_routes.pop(frame.correlation, None)
                requester = self._peers.get(requester_id) if requester_id is not None else None
                if requester is not None:
                    self._send(requester, frame)
            return
        if kind == FrameKind.ACTION_GOAL:
            with self._lock:
                server_id = self._actions.get(frame.topic)
                if server_id is None or server_id not in self._peers:
                    self._reply(peer, FrameKind.ACTION_RESULT, frame, error=f"no such action: {frame.topic}")
                    return
                self._goal_routes[frame.correlation] = (peer.id, server_id)
                self._send(self._peers[server_id], frame)
            return
        if kind == FrameKind.ACTION_FEEDBACK:
            with self._lock:
                route = self._goal_routes.get(frame.correlation)
                if route is not None:
                    client = self._peers.get(route[0])
                    if client is not None:
                        self._send(client, frame)
            return
        if kind == FrameKind.ACTION_RESULT:
            with self._lock:
                route = self._goal_routes.pop(frame.correlation, None)
                if route is not None:
                    client = self._peers.get(route[0])
                    if client is not None:
                        self._send(client, frame)
            return
        if kind == FrameKind.ACTION_CANCEL:
            with self._lock:
                route = self._goal_routes.get(frame.correlation)
                if route is not None:
                    server = self._peers.get(route[1])
                    if server is not None:
                        self._send(server, frame)
            return
        if kind == FrameKind.INFO_REQ:
            payload = json.dumps(self.info(), sort_keys=True).encode("utf-8")
            with self._lock:
                self._reply(peer, FrameKind.INFO_RESP, frame, payload=payload,
                            payload_type=PayloadType.STRING_UTF8)
            return
        if kind in (FrameKind.ACK, FrameKind.HEARTBEAT, FrameKind.INFO_RESP):
            return  # control noise from clients; nothing to route
        log.warning("unhandled frame kind %s from peer %d", kind, peer.id)

    def _handle_advertise(self, peer: _Peer, frame: Frame) -> None:
        try:
            meta = json.loads(frame.payload.decode("utf-8")) if frame.payload else {}
        except (UnicodeDecodeError, json.JSONDecodeError):
            meta = {}
        role = meta.get("role", "publisher")
        node = meta.get("node")
        remove = bool(meta.get("remove"))
        with self._lock:
            if role == "node":
                existing = self._node_names.get(node) if node else None
                if node and existing is not None and existing != peer.id:
                    self._reply(peer, FrameKind.ADVERTISE, frame,
                                error=f"node name already taken: {node}")
                    return
                if node:
                    self._node_names[node] = peer.id
                    peer.node_name = node
                self._reply(peer, FrameKind.ADVERTISE, frame)
                return
            if role == "publisher":
                if remove:
                    ad = self._ads.get(frame.topic)
                    if ad is not None:
                        ad.publishers.discard((peer.id, frame.correlation))
                        if not ad.publishers:
                            del self._ads[frame.topic]
                    self._reply(peer, FrameKind.ADVERTISE, frame)
                    return
                ad = self._ads.get(frame.topic)
                if ad is not None and ad.payload_type != frame.payload_type:
                    self._reply(
                        peer, FrameKind.ADVERTISE, frame,
                        error=(
                            f"topic {frame.topic} is {PayloadType(ad.payload_type).name}, "
                            f"conflicting advertise as {PayloadType(frame.payload_type).name}"
                        ),
                    )
                    return
                if ad is None:
                    ad = self._ads[frame.topic] = _TopicAd(int(frame.payload_type))
                ad.publishers.add((peer.id, frame.correlation))
                self._reply(peer, FrameKind.ADVERTISE, frame)
                return
            if role in ("service", "action"):
                registry = self._services if role == "service" else self._actions
                if remove:
                    if registry.get(frame.topic) == peer.id:
                        del registry[frame.topic]
                    self._reply(peer, FrameKind.ADVERTISE, frame)
                    return
                owner = registry.get(frame.topic)
                if owner is not None and owner != peer.id and owner in self._peers:
                    self._reply(peer, FrameKind.ADVERTISE, frame,
                                error=f"{role} already registered: {frame.topic}")
                    return
                registry[frame.topic] = peer.id
                self._reply(peer, FrameKind.ADVERTISE, frame)
                return
            self._reply(peer, FrameKind.ADVERTISE, frame, error=f"unknown advertise role: {role}")

    # -- introspection -------------------------------------------------------

    def info(self) -> dict:
        with self._lock:
            topics = []
            for topic in sorted(self._ads):
                ad = self._ads[topic]
                subscriber_count = 0
                for pattern, refs in self._patterns.items():
                    if topic_matches(pattern, topic):
                        subscriber_count += sum(refs.values())
                topics.append(
                    {
                        "name": topic,
                        "type": PayloadType(ad.payload_type).name,
                        "publishers": len(ad.publishers),
                        "subscribers": subscriber_count,
                    }
                )
            return {
                "nodes": sorted(self._node_names),
                "topics": topics,
                "services": sorted(self._services),
            }

    # -- heartbeats ------------------------------------------------------------

    def heartbeat_tick(self) -> None:
        with self._lock:
            self._hb_seq += 1
            frame = Frame(
                FrameKind.HEARTBEAT, PayloadType.NULL, 0, self._hb_seq, time.time_ns(), ""
            )
            peers = list(self._peers.values())
        for peer in peers:
            self._send(peer, frame)

    def close_all_peers(self) -> None:
        with self._lock:
            peers = list(self._peers.values())
        for peer in peers:
            try:
                peer.close()
            except Exception:
                pass
            self.remove_peer(peer)


class BrokerHandle:
    """A running broker bound to an address; close() releases it."""

    def __init__(self, core: Broker, address: EndpointAddress):
        self.core = core
        self.address = address
        self._hb_stop = threading.Event()
        self._hb_thread = threading.Thread(target=self._hb_loop, name="broker-hb", daemon=True)
        self._server: Optional[_TcpServer] = None
        self._closed = False

    def _start(self) -> None:
        self._hb_thread.start()

    def _hb_loop(self) -> None:
        interval = self.core.config.heartbeat_interval
        while not self._hb_stop.wait(interval):
            self.core.heartbeat_tick()

    def attach(self) -> InprocConnection:
        """Give out a loopback connection (inproc endpoints only)."""
        if self._closed:
            raise transport.ConnectError("broker is closed")
        holder: list[InprocConnection] = []

        def deliver(frame: Frame) -> None:
            holder[0]._deliver(frame)

        def peer_close() -> None:
            holder[0]._mark_closed()

        peer = self.core.add_peer(deliver, peer_close)
        conn = InprocConnection(
            handle_frame=lambda _conn, frame: self.core.handle_frame(peer, frame),
            on_detach=lambda _conn: self.core.remove_peer(peer),
        )
        holder.append(conn)
        return conn

    def info(self) -> dict:
        return self.core.info()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._hb_stop.set()
        if self.address.scheme == "inproc":
            transport.unregister_inproc(self.address.target, self)
        if self._server is not None:
            self._server.close()
        self.core.close_all_peers()

    def __enter__(self) -> "BrokerHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class _TcpServer:
    def __init__(self, handle: BrokerHandle, address: EndpointAddress):
        self.handle = handle
        self.core = handle.core
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((address.host, address.port))
        except OSError as exc:
            raise transport.ConnectError(f"cannot bind {address}: {exc}") from exc
        self._sock.listen(64)
        self._closed = False
        self._accept_thread = threading.Thread(target=self._accept_loop, name="broker-accept", daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                client, addr = self._sock.accept()
            except OSError:
                return
            _TcpPeer(self.core, client, f"{addr[0]}:{addr[1]}")

    def close(self) -> None:
        self._closed = True
        # shutdown first: close() alone leaves the socket listening while
        # the accept thread is blocked inside accept() on it
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass
        self._accept_thread.join(timeout=2.0)


class _TcpPeer:
    """Broker side of one TCP client: reader decodes, writer drains a queue."""

    def __init__(self, core: Broker, sock: socket.socket, name: str):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.core = core
        self.sock = sock
        self.name = name
        self._tx_lock = threading.Lock()
        self._tx_ready = threading.Condition(self._tx_lock)
        self._tx_queue: deque[bytes] = deque()
        self._down = False
        self.peer = core.add_peer(self._enqueue, self._close_sock)
        threading.Thread(target=self._read_loop, name=f"broker-rx-{name}", daemon=True).start()
        threading.Thread(target=self._write_loop, name=f"broker-tx-{name}", daemon=True).start()

    def _enqueue(self, frame: Frame) -> None:
        data = encode_frame(frame)
        with self._tx_ready:
            if self._down:
                raise transport.ConnectionClosedError("peer gone")
            self._tx_queue.append(data)
            self._tx_ready.notify()

    def _read_loop(self) -> None:
        decoder = FrameStreamDecoder()
        try:
            while True:
                chunk = self.sock.recv(65536)
                if not chunk:
                    break
                for frame in decoder.feed(chunk):
                    self.core.handle_frame(self.peer, frame)
        except CodecError as exc:
            log.warning("broker peer %s: decode error, dropping connection: %s", self.name, exc)
        except OSError:
            pass
        finally:
            self._close_sock()
            self.core.remove_peer(self.peer)

    def _write_loop(self) -> None:
        try:
            while True:
                with self._tx_ready:
                    while not self._tx_queue and not self._down:
                        self._tx_ready.wait()
                    if self._down and not self._tx_queue:
                        return
                    chunks = []
                    size = 0
                    while self._tx_queue and size < 256 * 1024:
                        chunk = self._tx_queue.popleft()
                        chunks.append(chunk)
                        size += len(chunk)
                self.sock.sendall(b"".join(chunks))
        except OSError:
            self._close_sock()
            self.core.remove_peer(self.peer)

    def _close_sock(self) -> None:
        with self._tx_ready:
            self._down = True
            self._tx_ready.notify_all()
        try:
            self.sock.close()
        except OSError:
            pass


def broker_serve(address: "str | EndpointAddress", config: BrokerConfig | None = None) -> BrokerHandle:
    """Start a broker on an inproc or TCP endpoint and return its handle."""
    address = EndpointAddress.parse(address)
    handle = BrokerHandle(Broker(config), address)
    if address.scheme == "inproc":
        transport.register_inproc(address.target, handle)
    else:
        handle._server = _TcpServer(handle, address)
    handle._start()
    return handle
