export {
  Audio,
  BadMagicError,
  CodecError,
  CorrelationError,
  FLAG_ERROR_RESPONSE,
  FLAG_REQUIRES_ACK,
  Frame,
  FrameKind,
  FrameLengthError,
  FrameStreamDecoder,
  HEADER_SIZE,
  Image,
  PayloadError,
  PayloadType,
  PixelFormat,
  ReservedFlagError,
  SampleFormat,
  TopicError,
  TypedValue,
  UnknownKindError,
  UnknownPayloadTypeError,
  UnsupportedVersionError,
  VideoChunk,
  VideoCodec,
  decodeFrame,
  decodeTypedPayload,
  encodeFrame,
  encodeTypedPayloadAs,
  encodedSize,
  makeFrame,
  topicMatches,
} from "./wire.js";

export {
  CallFailedError,
  CallTimedOutError,
  GoalHandle,
  GoalResult,
  GoalState,
  MetaNode,
  NodeError,
  Publisher,
  Subscription,
} from "./client.js";
