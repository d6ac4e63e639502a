# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled frame codec.

Byte-for-byte and error-for-error equivalent to the pure-Python
``encode_frame_py`` / ``decode_frame_py`` in ``metaros.envelope``; the
shared classes are bound lazily on first use so either module can be
imported first.
"""

from cpython.bytes cimport PyBytes_FromStringAndSize, PyBytes_AS_STRING
from libc.string cimport memcpy, memcmp, memchr

DEF PREFIX_SIZE = 26
DEF HEADER_SIZE = 46

cdef bytes MAGIC = b"MROS"
cdef bytes ZERO_CORRELATION = b"\x00" * 16

cdef object _Frame = None
cdef object _kinds = None
cdef object _payload_types = None
cdef object _errors = None
cdef unsigned char _correlated[14]


cdef int _bind() except -1:
    global _Frame, _kinds, _payload_types, _errors
    from metaros import envelope
    _Frame = envelope.Frame
    _kinds = tuple(envelope.FrameKind)
    _payload_types = tuple(envelope.PayloadType)
    _errors = (
        envelope.BadMagicError,
        envelope.UnsupportedVersionError,
        envelope.UnknownKindError,
        envelope.UnknownPayloadTypeError,
        envelope.ReservedFlagError,
        envelope.FrameLengthError,
        envelope.TopicError,
        envelope.CorrelationError,
    )
    for tag in range(14):
        _correlated[tag] = 1 if _kinds[tag] in envelope.CORRELATED_KINDS else 0
    return 0


cdef inline void _put_u64(unsigned char *buf, unsigned long long value) noexcept:
    buf[0] = <unsigned char>(value >> 56)
    buf[1] = <unsigned char>(value >> 48)
    buf[2] = <unsigned char>(value >> 40)
    buf[3] = <unsigned char>(value >> 32)
    buf[4] = <unsigned char>(value >> 24)
    buf[5] = <unsigned char>(value >> 16)
    buf[6] = <unsigned char>(value >> 8)
    buf[7] = <unsigned char>value


cdef inline unsigned long long _get_u64(const unsigned char *buf) noexcept:
    return (
        (<unsigned long long>buf[0] << 56)
        | (<unsigned long long>buf[1] << 48)
        | (<unsigned long long>buf[2] << 40)
        | (<unsigned long long>buf[3] << 32)
        | (<unsigned long long>buf[4] << 24)
        | (<unsigned long long>buf[5] << 16)
        | (<unsigned long long>buf[6] << 8)
        | <unsigned long long>buf[7]
    )


def encode_frame(frame):
    """Serialize a frame. Compiled fast path."""
    if _Frame is None:
        _bind()
    cdef bytes topic = (<str>frame.topic).encode("utf-8")
    cdef Py_ssize_t topic_len = len(topic)
    if topic_len > 0xFFFF:
        raise _errors[6](f"topic is {topic_len} bytes, limit 65535")
    if memchr(<const char *>topic, 0, topic_len) != NULL:
        raise _errors[6]("topic contains NUL")
    cdef bytes payload = frame.payload
    cdef Py_ssize_t payload_len = len(payload)
    if payload_len > 0xFFFFFFFF:
        raise _errors[5](f"payload is {payload_len} bytes, limit {0xFFFFFFFF}")
    cdef unsigned long long flags_full = frame.flags
    if flags_full & 0xFC or flags_full > 0xFF:
        raise _errors[4](f"reserved flag bits set: 0x{frame.flags:x}")
    cdef bytes correlation = frame.correlation
    if len(correlation) != 16:
        raise _errors[7](f"correlation must be 16 bytes, got {len(correlation)}")
    cdef long long kind_tag = frame.kind
    if kind_tag < 0 or kind_tag > 13:
        raise _errors[2](f"kind tag {frame.kind}")
    cdef long long ptype_tag = frame.payload_type
    if ptype_tag < 0 or ptype_tag > 8:
        raise _errors[3](f"payload type tag {frame.payload_type}")
    if _correlated[kind_tag] and correlation == ZERO_CORRELATION:
        raise _errors[7](f"{_kinds[kind_tag].name} frame requires a nonzero correlation id")
    cdef object seq_obj = frame.sequence
    cdef object ts_obj = frame.timestamp_send
    if seq_obj < 0 or seq_obj > 0xFFFFFFFFFFFFFFFF:
        raise _errors[5](f"sequence out of u64 range: {seq_obj}")
    if ts_obj < 0 or ts_obj > 0xFFFFFFFFFFFFFFFF:
        raise _errors[5](f"timestamp_send out of u64 range: {ts_obj}")
    cdef unsigned long long sequence = seq_obj
    cdef unsigned long long timestamp = ts_obj

    cdef Py_ssize_t total = HEADER_SIZE + topic_len + payload_len
    cdef bytes out = PyBytes_FromStringAndSize(NULL, total)
    cdef unsigned char *buf = <unsigned char *>PyBytes_AS_STRING(out)
    memcpy(buf, <const char *>MAGIC, 4)
    buf[4] = 1
    buf[5] = <unsigned char>kind_tag
    buf[6] = <unsigned char>ptype_tag
    buf[7] = <unsigned char>flags_full
    _put_u64(buf + 8, sequence)
    _put_u64(buf + 16, timestamp)
    buf[24] = <unsigned char>(topic_len >> 8)
    buf[25] = <unsigned char>topic_len
    if topic_len:
        memcpy(buf + PREFIX_SIZE, <const char *>topic, topic_len)
    memcpy(buf + PREFIX_SIZE + topic_len, <const char *>correlation, 16)
    cdef Py_ssize_t off = PREFIX_SIZE + topic_len + 16
    buf[off] = <unsigned char>(payload_len >> 24)
    buf[off + 1] = <unsigned char>(payload_len >> 16)
    buf[off + 2] = <unsigned char>(payload_len >> 8)
    buf[off + 3] = <unsigned char>payload_len
    if payload_len:
        memcpy(buf + off + 4, <const char *>payload, payload_len)
    return out


def decode_frame(data):
    """Parse exactly one frame. Compiled fast path."""
    if _Frame is None:
        _bind()
    cdef const unsigned char[:] view = data
    cdef Py_ssize_t n = view.shape[0]
    if n < PREFIX_SIZE:
        raise _errors[5](f"{n} bytes is shorter than the fixed prefix")
    cdef const unsigned char *buf = &view[0]
    if memcmp(buf, <const char *>MAGIC, 4) != 0:
        raise _errors[0](f"bad magic {bytes(data[:4])!r}")
    if buf[4] != 1:
        raise _errors[1](f"version {buf[4]}")
    cdef unsigned int kind_tag = buf[5]
    if kind_tag > 13:
        raise _errors[2](f"kind tag {kind_tag}")
    cdef unsigned int ptype_tag = buf[6]
    if ptype_tag > 8:
        raise _errors[3](f"payload type tag {ptype_tag}")
    cdef unsigned int flags = buf[7]
    if flags & 0xFC:
        raise _errors[4](f"reserved flag bits set: 0x{flags:x}")
    cdef unsigned long long sequence = _get_u64(buf + 8)
    cdef unsigned long long timestamp = _get_u64(buf + 16)
    cdef Py_ssize_t topic_len = (<Py_ssize_t>buf[24] << 8) | buf[25]
    cdef Py_ssize_t topic_end = PREFIX_SIZE + topic_len
    if n < topic_end + 20:
        raise _errors[5]("truncated before payload length")
    cdef bytes correlation = PyBytes_FromStringAndSize(<const char *>(buf + topic_end), 16)
    cdef Py_ssize_t off = topic_end + 16
    cdef Py_ssize_t payload_len = (
        (<Py_ssize_t>buf[off] << 24)
        | (<Py_ssize_t>buf[off + 1] << 16)
        | (<Py_ssize_t>buf[off + 2] << 8)
        | <Py_ssize_t>buf[off + 3]
    )
    cdef Py_ssize_t total = HEADER_SIZE + topic_len + payload_len
    if n < total:
        raise _errors[5](f"declared total {total}, got {n}")
    if n > total:
        raise _errors[5](f"{n - total} trailing bytes after frame")
    cdef str topic
    try:
        topic = PyBytes_FromStringAndSize(<const char *>(buf + PREFIX_SIZE), topic_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise _errors[6]("topic is not valid UTF-8") from exc
    if memchr(buf + PREFIX_SIZE, 0, topic_len) != NULL:
        raise _errors[6]("topic contains NUL")
    if _correlated[kind_tag] and correlation == ZERO_CORRELATION:
        raise _errors[7](f"{_kinds[kind_tag].name} frame requires a nonzero correlation id")
    cdef bytes payload = PyBytes_FromStringAndSize(<const char *>(buf + topic_end + 20), payload_len)
    return _Frame(
        _kinds[kind_tag],
        _payload_types[ptype_tag],
        flags,
        sequence,
        timestamp,
        topic,
        correlation,
        payload,
    )
