"""Message envelope and the binary wire codec.

Every transport and log file in this package moves data as :class:`Frame`
values serialized by the codec here.  The layout is fixed, all multi-byte
integers big-endian:

    magic "MROS" | version | kind | payload_type | flags
    | sequence u64 | timestamp_send u64 | topic_len u16 | topic bytes
    | correlation 16B | payload_len u32 | payload bytes

The fixed portion is 46 bytes, so an encoded frame occupies exactly
``46 + len(topic utf-8) + len(payload)`` bytes.  Frames are self-delimiting:
a stream can be cut into frames from the declared lengths alone, which is
what :class:`FrameStreamDecoder` does.

A compiled codec is substituted at import time when the ``metaros._codec``
extension is available; ``CODEC_BACKEND`` names the active implementation
and the pure-Python functions stay importable as ``encode_frame_py`` /
``decode_frame_py`` for comparison.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

MAGIC = b"MROS"
VERSION = 1
HEADER_SIZE = 46  # every byte that is not topic or payload
MAX_TOPIC_LEN = 0xFFFF
MAX_PAYLOAD_LEN = 0xFFFF_FFFF
ZERO_CORRELATION = b"\x00" * 16

FLAG_REQUIRES_ACK = 0x01
FLAG_ERROR_RESPONSE = 0x02
RESERVED_FLAG_MASK = 0xFC

_PREFIX = struct.Struct("!4sBBBBQQH")  # through topic_len; 26 bytes
_PREFIX_SIZE = _PREFIX.size
_U32 = struct.Struct("!I")
_I64 = struct.Struct("!q")
_F64 = struct.Struct("!d")
_IMAGE_HDR = struct.Struct("!IIBB")
_AUDIO_HDR = struct.Struct("!IBBI")
_VIDEO_HDR = struct.Struct("!BIB")


class FrameKind(IntEnum):
    DATA = 0
    SVC_REQ = 1
    SVC_RESP = 2
    ACTION_GOAL = 3
    ACTION_FEEDBACK = 4
    ACTION_RESULT = 5
    ACTION_CANCEL = 6
    ACK = 7
    HEARTBEAT = 8
    SUB = 9
    UNSUB = 10
    ADVERTISE = 11
    INFO_REQ = 12
    INFO_RESP = 13


class PayloadType(IntEnum):
    NULL = 0
    BOOL = 1
    INT64 = 2
    FLOAT64 = 3
    STRING_UTF8 = 4
    BYTES = 5
    IMAGE = 6
    AUDIO = 7
    VIDEO_CHUNK = 8


class PixelFormat(IntEnum):
    GRAY8 = 0
    RGB8 = 1
    BGR8 = 2
    RGBA8 = 3


class SampleFormat(IntEnum):
    PCM16LE = 0
    F32LE = 1


class VideoCodec(IntEnum):
    RAW = 0
    OPAQUE = 1


_KINDS = tuple(FrameKind)
_PAYLOAD_TYPES = tuple(PayloadType)
_PIXEL_CHANNELS = {PixelFormat.GRAY8: 1, PixelFormat.RGB8: 3, PixelFormat.BGR8: 3, PixelFormat.RGBA8: 4}
_SAMPLE_BYTES = {SampleFormat.PCM16LE: 2, SampleFormat.F32LE: 4}

# Kinds whose frames must carry a nonzero correlation id.
CORRELATED_KINDS = frozenset(
    {
        FrameKind.SVC_REQ,
        FrameKind.SVC_RESP,
        FrameKind.ACTION_GOAL,
        FrameKind.ACTION_FEEDBACK,
        FrameKind.ACTION_RESULT,
        FrameKind.ACTION_CANCEL,
    }
)


class CodecError(Exception):
    """Base for every wire encoding/decoding failure."""


class BadMagicError(CodecError):
    pass


class UnsupportedVersionError(CodecError):
    pass


class UnknownKindError(CodecError):
    pass


class UnknownPayloadTypeError(CodecError):
    pass


class ReservedFlagError(CodecError):
    pass


class FrameLengthError(CodecError):
    """Truncated input, trailing bytes, or a field exceeding its width."""


class TopicError(CodecError):
    """Topic is not valid UTF-8, contains NUL, or is too long."""


class CorrelationError(CodecError):
    """Correlation id malformed, or zero where the kind requires one."""


class PayloadError(CodecError):
    """Typed payload malformed or inconsistent with declared dimensions."""


@dataclass(slots=True)
class Frame:
    """The wire-level message envelope.

    Instances are treated as immutable once handed to a transport; the
    codec round-trips them byte-exactly.
    """

    kind: FrameKind
    payload_type: PayloadType
    flags: int
    sequence: int
    timestamp_send: int
    topic: str
    correlation: bytes = ZERO_CORRELATION
    payload: bytes = b""

    def requires_ack(self) -> bool:
        return bool(self.flags & FLAG_REQUIRES_ACK)

    def is_error_response(self) -> bool:
        return bool(self.flags & FLAG_ERROR_RESPONSE)


def encoded_size(frame: Frame) -> int:
    """Size of ``encode_frame(frame)`` without producing the bytes."""
    return HEADER_SIZE + len(frame.topic.encode("utf-8")) + len(frame.payload)


def encode_frame_py(frame: Frame) -> bytes:
    """Serialize a frame. Pure-Python reference implementation."""
    topic = frame.topic.encode("utf-8")
    if len(topic) > MAX_TOPIC_LEN:
        raise TopicError(f"topic is {len(topic)} bytes, limit {MAX_TOPIC_LEN}")
    if "\x00" in frame.topic:
        raise TopicError("topic contains NUL")
    payload = frame.payload
    if len(payload) > MAX_PAYLOAD_LEN:
        raise FrameLengthError(f"payload is {len(payload)} bytes, limit {MAX_PAYLOAD_LEN}")
    flags = frame.flags
    if flags & ~0xFF or flags & RESERVED_FLAG_MASK:
        raise ReservedFlagError(f"reserved flag bits set: 0x{flags:x}")
    correlation = frame.correlation
    if len(correlation) != 16:
        raise CorrelationError(f"correlation must be 16 bytes, got {len(correlation)}")
    kind = frame.kind
    if not 0 <= kind <= 13:
        raise UnknownKindError(f"kind tag {kind}")
    if not 0 <= frame.payload_type <= 8:
        raise UnknownPayloadTypeError(f"payload type tag {frame.payload_type}")
    if kind in CORRELATED_KINDS and correlation == ZERO_CORRELATION:
        raise CorrelationError(f"{FrameKind(kind).name} frame requires a nonzero correlation id")
    if not 0 <= frame.sequence <= 0xFFFF_FFFF_FFFF_FFFF:
        raise FrameLengthError(f"sequence out of u64 range: {frame.sequence}")
    if not 0 <= frame.timestamp_send <= 0xFFFF_FFFF_FFFF_FFFF:
        raise FrameLengthError(f"timestamp_send out of u64 range: {frame.timestamp_send}")
    return b"".join(
        (
            _PREFIX.pack(
                MAGIC,
                VERSION,
                kind,
                frame.payload_type,
                flags,
                frame.sequence,
                frame.timestamp_send,
                len(topic),
            ),
            topic,
            correlation,
            _U32.pack(len(payload)),
            payload,
        )
    )


def decode_frame_py(data: bytes) -> Frame:
    """Parse exactly one frame; the input must be a complete encoding.

    Pure-Python reference implementation.  Raises a distinct
    :class:`CodecError` subclass for each malformation; no strict prefix
    of a valid encoding decodes successfully.
    """
    n = len(data)
    if n < _PREFIX_SIZE:
        raise FrameLengthError(f"{n} bytes is shorter than the fixed prefix")
    magic, version, kind_tag, ptype_tag, flags, sequence, timestamp, topic_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"version {version}")
    if kind_tag > 13:
        raise UnknownKindError(f"kind tag {kind_tag}")
    if ptype_tag > 8:
        raise UnknownPayloadTypeError(f"payload type tag {ptype_tag}")
    if flags & RESERVED_FLAG_MASK:
        raise ReservedFlagError(f"reserved flag bits set: 0x{flags:x}")
    topic_end = _PREFIX_SIZE + topic_len
    if n < topic_end + 20:
        raise FrameLengthError("truncated before payload length")
    correlation = bytes(data[topic_end : topic_end + 16])
    (payload_len,) = _U32.unpack_from(data, topic_end + 16)
    total = HEADER_SIZE + topic_len + payload_len
    if n < total:
        raise FrameLengthError(f"declared total {total}, got {n}")
    if n > total:
        raise FrameLengthError(f"{n - total} trailing bytes after frame")
    try:
        topic = bytes(data[_PREFIX_SIZE:topic_end]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TopicError("topic is not valid UTF-8") from exc
    if "\x00" in topic:
        raise TopicError("topic contains NUL")
    kind = _KINDS[kind_tag]
    if kind in CORRELATED_KINDS and correlation == ZERO_CORRELATION:
        raise CorrelationError(f"{kind.name} frame requires a nonzero correlation id")
    payload = bytes(data[topic_end + 20 : total])
    return Frame(kind, _PAYLOAD_TYPES[ptype_tag], flags, sequence, timestamp, topic, correlation, payload)


@dataclass(slots=True)
class Image:
    width: int
    height: int
    channels: int
    pixel_format: PixelFormat
    data: bytes


@dataclass(slots=True)
class Audio:
    sample_rate: int
    channels: int
    sample_format: SampleFormat
    frame_count: int
    data: bytes


@dataclass(slots=True)
class VideoChunk:
    codec: VideoCodec
    chunk_index: int
    keyframe: bool
    data: bytes


TypedValue = None | bool | int | float | str | bytes | Image | Audio | VideoChunk


def _check_image(image: Image) -> None:
    if image.width <= 0 or image.height <= 0 or image.channels <= 0:
        raise PayloadError(f"degenerate image dimensions {image.width}x{image.height}x{image.channels}")
    expected_channels = _PIXEL_CHANNELS.get(image.pixel_format)
    if expected_channels is None:
        raise PayloadError(f"unknown pixel format {image.pixel_format}")
    if image.channels != expected_channels:
        raise PayloadError(f"{PixelFormat(image.pixel_format).name} expects {expected_channels} channels, got {image.channels}")
    if len(image.data) != image.width * image.height * image.channels:
        raise PayloadError(f"image data is {len(image.data)} bytes, dimensions imply {image.width * image.height * image.channels}")


def _check_audio(audio: Audio) -> None:
    if audio.channels <= 0:
        raise PayloadError("audio needs at least one channel")
    sample_bytes = _SAMPLE_BYTES.get(audio.sample_format)
    if sample_bytes is None:
        raise PayloadError(f"unknown sample format {audio.sample_format}")
    expected = audio.frame_count * audio.channels * sample_bytes
    if len(audio.data) != expected:
        raise PayloadError(f"audio data is {len(audio.data)} bytes, declared dimensions imply {expected}")


def _encode_bool(value: bool) -> tuple[PayloadType, bytes]:
    return PayloadType.BOOL, b"\x01" if value else b"\x00"


def _encode_int(value: int) -> tuple[PayloadType, bytes]:
    try:
        return PayloadType.INT64, _I64.pack(value)
    except struct.error as exc:
        raise PayloadError(f"{value} out of int64 range") from exc


def encode_typed_payload(value: TypedValue) -> tuple[PayloadType, bytes]:
    """Encode a native value into (payload type tag, payload bytes)."""
    fast = _ENCODERS.get(type(value))
    if fast is not None:
        return fast(value)
    if value is None:
        return PayloadType.NULL, b""
    if isinstance(value, bool):
        return _encode_bool(value)
    if isinstance(value, int):
        return _encode_int(value)
    if isinstance(value, float):
        return PayloadType.FLOAT64, _F64.pack(value)
    if isinstance(value, str):
        return PayloadType.STRING_UTF8, value.encode("utf-8")
    if isinstance(value, (bytes, bytearray, memoryview)):
        return PayloadType.BYTES, bytes(value)
    if isinstance(value, Image):
        _check_image(value)
        return PayloadType.IMAGE, _IMAGE_HDR.pack(value.width, value.height, value.channels, value.pixel_format) + value.data
    if isinstance(value, Audio):
        _check_audio(value)
        return (
            PayloadType.AUDIO,
            _AUDIO_HDR.pack(value.sample_rate, value.channels, value.sample_format, value.frame_count) + value.data,
        )
    if isinstance(value, VideoChunk):
        if value.codec not in (VideoCodec.RAW, VideoCodec.OPAQUE):
            raise PayloadError(f"unknown video codec {value.codec}")
        return PayloadType.VIDEO_CHUNK, _VIDEO_HDR.pack(value.codec, value.chunk_index, 1 if value.keyframe else 0) + value.data
    raise PayloadError(f"unsupported value type {type(value).__name__}")


_ENCODERS = {
    type(None): lambda value: (PayloadType.NULL, b""),
    bool: _encode_bool,
    int: _encode_int,
    float: lambda value: (PayloadType.FLOAT64, _F64.pack(value)),
    str: lambda value: (PayloadType.STRING_UTF8, value.encode("utf-8")),
    bytes: lambda value: (PayloadType.BYTES, value),
}


def _decode_null(data: bytes) -> None:
    if data:
        raise PayloadError("NULL payload must be empty")
    return None


def _decode_bool(data: bytes) -> bool:
    if data == b"\x00":
        return False
    if data == b"\x01":
        return True
    raise PayloadError(f"bad BOOL encoding {data!r}")


def _decode_int(data: bytes) -> int:
    if len(data) != 8:
        raise PayloadError(f"INT64 payload must be 8 bytes, got {len(data)}")
    return _I64.unpack(data)[0]


def _decode_float(data: bytes) -> float:
    if len(data) != 8:
        raise PayloadError(f"FLOAT64 payload must be 8 bytes, got {len(data)}")
    return _F64.unpack(data)[0]


def _decode_str(data: bytes) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise PayloadError("STRING_UTF8 payload is not valid UTF-8") from exc


def decode_typed_payload(payload_type: PayloadType, data: bytes) -> TypedValue:
    """Inverse of :func:`encode_typed_payload` for a declared type tag."""
    fast = _DECODERS.get(payload_type)
    if fast is not None:
        return fast(data)
    if payload_type == PayloadType.IMAGE:
        if len(data) < _IMAGE_HDR.size:
            raise PayloadError("IMAGE payload shorter than its header")
        width, height, channels, pixel_format = _IMAGE_HDR.unpack_from(data)
        if pixel_format > 3:
            raise PayloadError(f"unknown pixel format {pixel_format}")
        image = Image(width, height, channels, PixelFormat(pixel_format), bytes(data[_IMAGE_HDR.size :]))
        _check_image(image)
        return image
    if payload_type == PayloadType.AUDIO:
        if len(data) < _AUDIO_HDR.size:
            raise PayloadError("AUDIO payload shorter than its header")
        sample_rate, channels, sample_format, frame_count = _AUDIO_HDR.unpack_from(data)
        if sample_format > 1:
            raise PayloadError(f"unknown sample format {sample_format}")
        audio = Audio(sample_rate, channels, SampleFormat(sample_format), frame_count, bytes(data[_AUDIO_HDR.size :]))
        _check_audio(audio)
        return audio
    if payload_type == PayloadType.VIDEO_CHUNK:
        if len(data) < _VIDEO_HDR.size:
            raise PayloadError("VIDEO_CHUNK payload shorter than its header")
        codec, chunk_index, keyframe = _VIDEO_HDR.unpack_from(data)
        if codec > 1:
            raise PayloadError(f"unknown video codec {codec}")
        if keyframe > 1:
            raise PayloadError(f"bad keyframe flag {keyframe}")
        return VideoChunk(VideoCodec(codec), chunk_index, bool(keyframe), bytes(data[_VIDEO_HDR.size :]))
    raise UnknownPayloadTypeError(f"payload type tag {payload_type}")


_DECODERS = {
    PayloadType.NULL: _decode_null,
    PayloadType.BOOL: _decode_bool,
    PayloadType.INT64: _decode_int,
    PayloadType.FLOAT64: _decode_float,
    PayloadType.STRING_UTF8: _decode_str,
    PayloadType.BYTES: bytes,
}


_TYPE_NAMES = {
    "null": PayloadType.NULL,
    "bool": PayloadType.BOOL,
    "int64": PayloadType.INT64,
    "float64": PayloadType.FLOAT64,
    "string": PayloadType.STRING_UTF8,
    "bytes": PayloadType.BYTES,
    "image": PayloadType.IMAGE,
    "audio": PayloadType.AUDIO,
    "video": PayloadType.VIDEO_CHUNK,
}


def payload_type_from_name(name: str) -> PayloadType:
    try:
        return _TYPE_NAMES[name.lower()]
    except KeyError:
        raise UnknownPayloadTypeError(f"unknown payload type name {name!r}") from None


def payload_type_name(payload_type: PayloadType) -> str:
    for name, tag in _TYPE_NAMES.items():
        if tag == payload_type:
            return name
    raise UnknownPayloadTypeError(f"payload type tag {payload_type}")


class FrameStreamDecoder:
    """Incremental splitter for a byte stream of concatenated frames.

    Feed arbitrary chunks; complete frames come back in order.  Because
    frames are self-delimiting no outer length prefix exists on the wire.
    """

    __slots__ = ("_buf",)

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[Frame]:
        self._buf += chunk
        frames: list[Frame] = []
        buf = self._buf
        start = 0
        end = len(buf)
        while True:
            if end - start < _PREFIX_SIZE:
                break
            # vet the fixed header before trusting its declared lengths
            if bytes(buf[start : start + 4]) != MAGIC:
                raise BadMagicError(f"bad magic {bytes(buf[start:start + 4])!r} in stream")
            if buf[start + 4] != VERSION:
                raise UnsupportedVersionError(f"version {buf[start + 4]} in stream")
            topic_len = (buf[start + 24] << 8) | buf[start + 25]
            if end - start < _PREFIX_SIZE + topic_len + 20:
                break
            off = start + _PREFIX_SIZE + topic_len + 16
            payload_len = int.from_bytes(buf[off : off + 4], "big")
            total = HEADER_SIZE + topic_len + payload_len
            if end - start < total:
                break
            frames.append(decode_frame(bytes(buf[start : start + total])))
            start += total
        if start:
            del buf[:start]
        return frames

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


# Bind the compiled codec when present; keep the pure functions importable.
encode_frame = encode_frame_py
decode_frame = decode_frame_py
CODEC_BACKEND = "python"
try:
    from metaros import _codec as _accel  # type: ignore[attr-defined]

    encode_frame = _accel.encode_frame
    decode_frame = _accel.decode_frame
    CODEC_BACKEND = "cython"
except ImportError:  # extension not built; pure Python stands in
    pass
