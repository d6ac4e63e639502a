import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaros import envelope
from metaros.envelope import (
    HEADER_SIZE,
    ZERO_CORRELATION,
    Audio,
    BadMagicError,
    CodecError,
    CorrelationError,
    Frame,
    FrameKind,
    FrameLengthError,
    FrameStreamDecoder,
    Image,
    PayloadError,
    PayloadType,
    PixelFormat,
    ReservedFlagError,
    SampleFormat,
    TopicError,
    UnknownKindError,
    UnknownPayloadTypeError,
    UnsupportedVersionError,
    VideoChunk,
    decode_frame,
    decode_frame_py,
    decode_typed_payload,
    encode_frame,
    encode_frame_py,
    encode_typed_payload,
    encoded_size,
)

from conftest import random_frame


def field_width_oracle(frame: Frame) -> int:
    """Sum the wire field widths independently of the codec."""
    widths = [
        4,   # magic
        1,   # version
        1,   # kind
        1,   # payload_type
        1,   # flags
        8,   # sequence
        8,   # timestamp_send
        2,   # topic length
        len(frame.topic.encode("utf-8")),
        16,  # correlation
        4,   # payload length
        len(frame.payload),
    ]
    return sum(widths)


def make_frame(**overrides) -> Frame:
    base = dict(
        kind=FrameKind.DATA,
        payload_type=PayloadType.NULL,
        flags=0,
        sequence=0,
        timestamp_send=0,
        topic="t",
        correlation=ZERO_CORRELATION,
        payload=b"",
    )
    base.update(overrides)
    return Frame(**base)


class TestFrameCodec:
    def test_minimal_data_frame_is_47_bytes(self):
        frame = make_frame()
        data = encode_frame(frame)
        assert len(data) == 47 == field_width_oracle(frame)
        assert data[:4] == b"MROS"
        assert data[4] == 0x01

    def test_chatter_with_100_byte_payload_is_153_bytes(self):
        frame = make_frame(topic="chatter", payload_type=PayloadType.BYTES, payload=b"x" * 100)
        data = encode_frame(frame)
        assert len(data) == 153 == field_width_oracle(frame)
        decoded = decode_frame(data)
        assert decoded.topic == "chatter"
        assert len(decoded.payload) == 100
        assert decoded == frame

    def test_round_trip_10k_random_frames_byte_exact(self):
        rng = random.Random(0xC0DEC)
        for _ in range(10_000):
            frame = random_frame(rng)
            data = encode_frame(frame)
            assert len(data) == HEADER_SIZE + len(frame.topic.encode()) + len(frame.payload)
            assert len(data) == field_width_oracle(frame)
            decoded = decode_frame(data)
            assert decoded == frame
            assert encode_frame(decoded) == data

    def test_no_strict_prefix_decodes(self):
        rng = random.Random(7)
        for _ in range(50):
            data = encode_frame(random_frame(rng, max_payload=60))
            for cut in range(len(data)):
                with pytest.raises(FrameLengthError):
                    decode_frame(data[:cut])

    def test_trailing_bytes_rejected(self):
        data = encode_frame(make_frame())
        with pytest.raises(FrameLengthError):
            decode_frame(data + b"\x00")

    def test_bad_magic(self):
        data = bytearray(encode_frame(make_frame()))
        data[:4] = b"XROS"
        with pytest.raises(BadMagicError):
            decode_frame(bytes(data))

    def test_unknown_version(self):
        data = bytearray(encode_frame(make_frame()))
        data[4] = 2
        with pytest.raises(UnsupportedVersionError):
            decode_frame(bytes(data))

    def test_unknown_kind_and_payload_type(self):
        data = bytearray(encode_frame(make_frame()))
        data[5] = 14
        with pytest.raises(UnknownKindError):
            decode_frame(bytes(data))
        data = bytearray(encode_frame(make_frame()))
        data[6] = 9
        with pytest.raises(UnknownPayloadTypeError):
            decode_frame(bytes(data))

    def test_reserved_flag_bits_rejected_both_ways(self):
        data = bytearray(encode_frame(make_frame()))
        data[7] = 0x04
        with pytest.raises(ReservedFlagError):
            decode_frame(bytes(data))
        with pytest.raises(ReservedFlagError):
            encode_frame(make_frame(flags=0x80))

    def test_invalid_utf8_topic_rejected(self):
        frame = make_frame(topic="ab")
        data = bytearray(encode_frame(frame))
        data[26] = 0xFF
        data[27] = 0xFE
        with pytest.raises(TopicError):
            decode_frame(bytes(data))

    def test_topic_with_nul_rejected_at_encode(self):
        with pytest.raises(TopicError):
            encode_frame(make_frame(topic="a\x00b"))

    def test_topic_too_long_rejected(self):
        with pytest.raises(TopicError):
            encode_frame(make_frame(topic="x" * 65536))

    def test_service_kinds_require_nonzero_correlation(self):
        with pytest.raises(CorrelationError):
            encode_frame(make_frame(kind=FrameKind.SVC_REQ))
        good = encode_frame(make_frame(kind=FrameKind.SVC_REQ, correlation=b"\x01" * 16))
        mutated = bytearray(good)
        mutated[27:43] = ZERO_CORRELATION  # topic is 1 byte
        with pytest.raises(CorrelationError):
            decode_frame(bytes(mutated))

    def test_encoded_size_matches_encoding(self):
        rng = random.Random(3)
        for _ in range(200):
            frame = random_frame(rng)
            assert encoded_size(frame) == len(encode_frame(frame))

    @given(
        topic=st.text(
            st.characters(blacklist_characters="\x00", max_codepoint=0x2FFF), max_size=80
        ),
        payload=st.binary(max_size=200),
        sequence=st.integers(min_value=0, max_value=2**64 - 1),
        timestamp=st.integers(min_value=0, max_value=2**64 - 1),
        flags=st.integers(min_value=0, max_value=3),
    )
    @settings(max_examples=200, deadline=None)
    def test_round_trip_property(self, topic, payload, sequence, timestamp, flags):
        frame = make_frame(
            payload_type=PayloadType.BYTES,
            flags=flags,
            sequence=sequence,
            timestamp_send=timestamp,
            topic=topic,
            payload=payload,
        )
        assert decode_frame(encode_frame(frame)) == frame


@pytest.mark.skipif(envelope.CODEC_BACKEND != "cython", reason="compiled codec not built")
class TestBackendParity:
    def test_random_frames_agree(self):
        rng = random.Random(99)
        for _ in range(2000):
            frame = random_frame(rng)
            fast = encode_frame(frame)
            assert fast == encode_frame_py(frame)
            assert decode_frame(fast) == decode_frame_py(fast) == frame

    def test_error_classes_agree(self):
        base = encode_frame(make_frame(topic="abc", payload=b"12345", payload_type=PayloadType.BYTES))
        mutations = [
            b"XROS" + base[4:],
            base[:4] + b"\x07" + base[5:],
            base[:5] + b"\x63" + base[6:],
            base[:6] + b"\x63" + base[7:],
            base[:7] + b"\xff" + base[8:],
            base[:-2],
            base + b"!",
        ]
        for mutated in mutations:
            fast_error = python_error = None
            try:
                decode_frame(mutated)
            except CodecError as exc:
                fast_error = type(exc)
            try:
                decode_frame_py(mutated)
            except CodecError as exc:
                python_error = type(exc)
            assert fast_error is python_error is not None


class TestTypedPayloads:
    def test_int64_one_is_big_endian(self):
        payload_type, data = encode_typed_payload(1)
        assert payload_type == PayloadType.INT64
        assert data == bytes.fromhex("0000000000000001")

    def test_int64_range(self):
        encode_typed_payload(2**63 - 1)
        encode_typed_payload(-(2**63))
        with pytest.raises(PayloadError):
            encode_typed_payload(2**63)

    def test_bool_is_not_int(self):
        assert encode_typed_payload(True)[0] == PayloadType.BOOL
        assert encode_typed_payload(1)[0] == PayloadType.INT64

    def test_2x2_gray8_image_is_14_bytes(self):
        image = Image(2, 2, 1, PixelFormat.GRAY8, b"\x01\x02\x03\x04")
        payload_type, data = encode_typed_payload(image)
        assert payload_type == PayloadType.IMAGE
        # byte-count oracle: u32 + u32 + u8 + u8 header, then w*h*c data
        assert len(data) == 4 + 4 + 1 + 1 + 2 * 2 * 1 == 14
        assert decode_typed_payload(payload_type, data) == image

    def test_zero_size_image_rejected(self):
        with pytest.raises(PayloadError):
            encode_typed_payload(Image(0, 0, 1, PixelFormat.GRAY8, b""))
        with pytest.raises(PayloadError):
            encode_typed_payload(Image(1, 1, 0, PixelFormat.GRAY8, b""))
        # 1x1 is the smallest valid image
        image = Image(1, 1, 1, PixelFormat.GRAY8, b"\x7f")
        payload_type, data = encode_typed_payload(image)
        assert decode_typed_payload(payload_type, data) == image

    def test_image_data_length_mismatch(self):
        with pytest.raises(PayloadError):
            encode_typed_payload(Image(2, 2, 3, PixelFormat.RGB8, b"short"))

    def test_image_channel_format_consistency(self):
        with pytest.raises(PayloadError):
            encode_typed_payload(Image(2, 2, 1, PixelFormat.RGB8, b"\x00" * 4))

    def test_audio_round_trip_and_dimension_check(self):
        audio = Audio(16000, 2, SampleFormat.PCM16LE, 4, b"\x00" * 16)
        payload_type, data = encode_typed_payload(audio)
        assert decode_typed_payload(payload_type, data) == audio
        with pytest.raises(PayloadError):
            encode_typed_payload(Audio(16000, 2, SampleFormat.PCM16LE, 4, b"\x00" * 15))

    def test_unknown_formats_rejected_on_decode(self):
        image = Image(1, 1, 1, PixelFormat.GRAY8, b"\x00")
        _, data = encode_typed_payload(image)
        bad = bytearray(data)
        bad[9] = 9  # pixel_format byte
        with pytest.raises(PayloadError):
            decode_typed_payload(PayloadType.IMAGE, bytes(bad))
        audio = Audio(8000, 1, SampleFormat.F32LE, 1, b"\x00" * 4)
        _, data = encode_typed_payload(audio)
        bad = bytearray(data)
        bad[5] = 7  # sample_format byte
        with pytest.raises(PayloadError):
            decode_typed_payload(PayloadType.AUDIO, bytes(bad))

    def test_video_chunk_round_trip(self):
        chunk = VideoChunk(codec=1, chunk_index=42, keyframe=True, data=b"blob")
        payload_type, data = encode_typed_payload(chunk)
        assert payload_type == PayloadType.VIDEO_CHUNK
        decoded = decode_typed_payload(payload_type, data)
        assert decoded == VideoChunk(1, 42, True, b"blob")

    def test_null_and_scalars_round_trip(self):
        for value in (None, True, False, 0, -1, 2**40, 0.0, -1.5, float("inf"), "", "héllo", b"", b"raw"):
            payload_type, data = encode_typed_payload(value)
            assert decode_typed_payload(payload_type, data) == value

    def test_randomized_typed_round_trip(self):
        rng = random.Random(11)
        for _ in range(2000):
            choice = rng.randrange(6)
            if choice == 0:
                value = rng.choice((True, False))
            elif choice == 1:
                value = rng.randrange(-(2**63), 2**63)
            elif choice == 2:
                value = rng.uniform(-1e308, 1e308)
            elif choice == 3:
                value = "".join(chr(rng.randint(0x20, 0x2FA0)) for _ in range(rng.randint(0, 30)))
            elif choice == 4:
                value = bytes(rng.randrange(256) for _ in range(rng.randint(0, 50)))
            else:
                value = None
            payload_type, data = encode_typed_payload(value)
            assert decode_typed_payload(payload_type, data) == value

    def test_strict_decode_lengths(self):
        with pytest.raises(PayloadError):
            decode_typed_payload(PayloadType.NULL, b"x")
        with pytest.raises(PayloadError):
            decode_typed_payload(PayloadType.BOOL, b"\x02")
        with pytest.raises(PayloadError):
            decode_typed_payload(PayloadType.INT64, b"\x00" * 7)
        with pytest.raises(PayloadError):
            decode_typed_payload(PayloadType.FLOAT64, b"\x00" * 9)


class TestStreamDecoder:
    def test_chunked_reassembly(self):
        rng = random.Random(21)
        frames = [random_frame(rng, max_payload=80) for _ in range(50)]
        stream = b"".join(encode_frame(f) for f in frames)
        for chunk_size in (1, 7, 64, 1000, len(stream)):
            decoder = FrameStreamDecoder()
            out = []
            for i in range(0, len(stream), chunk_size):
                out.extend(decoder.feed(stream[i : i + chunk_size]))
            assert out == frames
            assert decoder.pending_bytes == 0

    def test_decode_error_propagates(self):
        decoder = FrameStreamDecoder()
        with pytest.raises(BadMagicError):
            decoder.feed(b"JUNKJUNKJUNKJUNKJUNKJUNKJUNKJUNK" + b"\x00" * 20)
