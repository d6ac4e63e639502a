"""Record frames to an append-only log file and replay them as publications.

File format, all integers big-endian:

    magic "MROSLOG1" (8 bytes)
    repeated records: record_len u32, then record_len bytes of one
    encoded frame

Every record is a complete frame encoding; a file truncated mid-record
is readable up to the last complete record.
"""

from __future__ import annotations

import os
import struct
import threading
import time
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

from metaros.envelope import Frame, decode_frame, encode_frame
from metaros.nodegraph import Node, Publisher, TopicSpec
from metaros.reliability import QosProfile

LOG_MAGIC = b"MROSLOG1"
_RECORD_LEN = struct.Struct("!I")

FLUSH_EVERY_FRAMES = 100
FLUSH_EVERY_SECONDS = 1.0


class LogFormatError(Exception):
    pass


class LogTruncated(LogFormatError):
    """Raised with the byte offset of the first incomplete record."""

    def __init__(self, offset: int):
        super().__init__(f"log truncated at byte {offset}")
        self.offset = offset


class LogWriter:
    """Append-only frame sink; one writer per file."""

    def __init__(self, path: str):
        self.path = path
        self._file = open(path, "wb")
        self._file.write(LOG_MAGIC)
        self._lock = threading.Lock()
        self._since_flush = 0
        self._last_flush = time.monotonic()
        self.frames_written = 0
        self.error: Optional[Exception] = None

    def append(self, frame: Frame) -> None:
        data = encode_frame(frame)
        with self._lock:
            if self.error is not None:
                raise self.error
            try:
                self._file.write(_RECORD_LEN.pack(len(data)))
                self._file.write(data)
                self.frames_written += 1
                self._since_flush += 1
                now = time.monotonic()
                if self._since_flush >= FLUSH_EVERY_FRAMES or now - self._last_flush >= FLUSH_EVERY_SECONDS:
                    self._file.flush()
                    self._since_flush = 0
                    self._last_flush = now
            except OSError as exc:
                self.error = exc
                raise

    def close(self) -> None:
        with self._lock:
            try:
                self._file.flush()
            finally:
                self._file.close()


def read_log(path: str, *, strict: bool = False) -> Iterator[Frame]:
    """Yield frames in file order.

    A trailing incomplete record ends iteration quietly unless
    ``strict``, in which case :class:`LogTruncated` reports its offset.
    A file whose header is wrong always raises.
    """
    with open(path, "rb") as f:
        header = f.read(len(LOG_MAGIC))
        if header != LOG_MAGIC:
            raise LogFormatError(f"bad log header {header!r}")
        offset = len(LOG_MAGIC)
        while True:
            len_bytes = f.read(4)
            if not len_bytes:
                return
            if len(len_bytes) < 4:
                if strict:
                    raise LogTruncated(offset)
                return
            (record_len,) = _RECORD_LEN.unpack(len_bytes)
            data = f.read(record_len)
            if len(data) < record_len:
                if strict:
                    raise LogTruncated(offset)
                return
            yield decode_frame(data)
            offset += 4 + record_len


class Recorder:
    """Subscribes to patterns and appends each matching DATA frame verbatim."""

    def __init__(self, node: Node, patterns: Iterable[str], path: str):
        self.writer = LogWriter(path)
        self._subs = [node.subscribe_raw(p, self._on_frame, queue_depth=4096) for p in patterns]
        self._stopped = False

    def _on_frame(self, frame: Frame) -> None:
        if self._stopped:
            return
        try:
            self.writer.append(frame)
        except OSError:
            self._stopped = True  # error kept on writer.error

    @property
    def frames_written(self) -> int:
        return self.writer.frames_written

    @property
    def error(self) -> Optional[Exception]:
        return self.writer.error

    def close(self) -> None:
        self._stopped = True
        for sub in self._subs:
            sub.unsubscribe()
        self.writer.close()


def record(node: Node, patterns: Iterable[str], path: str) -> Recorder:
    """Start recording DATA frames matching ``patterns`` to ``path``."""
    return Recorder(node, list(patterns), path)


@dataclass
class ReplayStats:
    frames: int = 0
    topics: int = 0
    duration_s: float = 0.0


def replay(path: str, node: Node, timing: str = "fast") -> ReplayStats:
    """Republish a log's frames in file order.

    ``timing="timed"`` reproduces the recorded inter-frame gaps from the
    stored send timestamps; ``"fast"`` publishes back to back.  Payload
    bytes are preserved exactly; sequence numbers and timestamps are
    stamped fresh at publish.
    """
    if timing not in ("fast", "timed"):
        raise ValueError("timing must be 'fast' or 'timed'")
    publishers: dict[tuple[str, int], Publisher] = {}
    stats = ReplayStats()
    started = time.monotonic()
    previous_ts: Optional[int] = None
    for frame in read_log(path, strict=True):
        if timing == "timed" and previous_ts is not None:
            gap_s = (frame.timestamp_send - previous_ts) / 1e9
            if gap_s > 0:
                time.sleep(gap_s)
        previous_ts = frame.timestamp_send
        key = (frame.topic, int(frame.payload_type))
        publisher = publishers.get(key)
        if publisher is None:
            spec = TopicSpec(frame.topic, frame.payload_type, QosProfile())
            publisher = node.advertise(spec, _internal=True)
            publishers[key] = publisher
        publisher.publish_raw(frame.payload_type, frame.payload)
        stats.frames += 1
    stats.topics = len(publishers)
    stats.duration_s = time.monotonic() - started
    for publisher in publishers.values():
        publisher.close()
    return stats
