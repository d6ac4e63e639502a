"""metaros: broker-based typed pub/sub, service and action middleware."""

from metaros.envelope import (
    CODEC_BACKEND,
    Audio,
    CodecError,
    Frame,
    FrameKind,
    Image,
    PayloadType,
    PixelFormat,
    SampleFormat,
    VideoChunk,
    decode_frame,
    decode_typed_payload,
    encode_frame,
    encode_typed_payload,
)
from metaros.reliability import QosProfile, ReliabilityMode
from metaros.nodegraph import Node, ParameterDecl, RateController, TopicSpec
from metaros.executor import CfsExecutor, FifoExecutor, SchedulerConfig
from metaros.transport import EndpointAddress, FaultProfile, connect, wrap_with_faults
from metaros.broker import broker_serve
from metaros.services import CompletionState, CompletionToken
from metaros.actions import GoalState

__version__ = "0.1.0"

__all__ = [
    "Audio",
    "CODEC_BACKEND",
    "CfsExecutor",
    "CodecError",
    "CompletionState",
    "CompletionToken",
    "EndpointAddress",
    "FaultProfile",
    "FifoExecutor",
    "Frame",
    "FrameKind",
    "GoalState",
    "Image",
    "Node",
    "ParameterDecl",
    "PayloadType",
    "PixelFormat",
    "QosProfile",
    "RateController",
    "ReliabilityMode",
    "SampleFormat",
    "SchedulerConfig",
    "TopicSpec",
    "VideoChunk",
    "broker_serve",
    "connect",
    "decode_frame",
    "decode_typed_payload",
    "encode_frame",
    "encode_typed_payload",
    "wrap_with_faults",
    "__version__",
]
