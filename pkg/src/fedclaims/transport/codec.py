"""Binary encoding of federation messages.

Frame layout (all integers little-endian, floats IEEE-754 binary64 LE)::

    0  magic            4 bytes  b"FLCL"
    4  version          u8
    5  msg_type         u8
    6  sender_id        u16
    8  round            u32
    12 payload_length   u32
    16 payload          payload_length bytes

Payload bodies carry model parameters, activations, gradients, metrics and
control fields only. There is deliberately no payload type able to carry a
feature row or a label. Activations and gradients do cross the boundary in
split training; that is the protocol's residual leakage surface.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from ..errors import (
    BadMagicError,
    EncodeError,
    InvalidPayloadError,
    LengthMismatchError,
    TrailingBytesError,
    TruncatedFrameError,
    UnknownMessageTypeError,
    UnsupportedVersionError,
)

MAGIC = b"FLCL"
PROTOCOL_VERSION = 1
SUPPORTED_VERSIONS = frozenset({PROTOCOL_VERSION})
HEADER = struct.Struct("<4sBBHII")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 2**31 - 1


class MsgType(enum.IntEnum):
    JOIN_REQUEST = 1
    JOIN_ACK = 2
    GLOBAL_MODEL = 3
    LOCAL_UPDATE = 4
    ACTIVATION_BATCH = 5
    GRADIENT_BATCH = 6
    METRICS_REPORT = 7
    ROUND_COMPLETE = 8
    SHUTDOWN = 9


class Role(enum.IntEnum):
    COLLABORATOR = 1
    FEATURE_WORKER = 2
    LABEL_WORKER = 3


class JoinStatus(enum.IntEnum):
    ACCEPTED = 0
    VERSION_MISMATCH = 1
    BAD_ROLE = 2
    SHAPE_MISMATCH = 3
    DUPLICATE_ID = 4


class ShutdownReason(enum.IntEnum):
    NORMAL = 0
    DIVERGED = 1
    ERROR = 2


def _f64(values) -> np.ndarray:
    a = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    a.setflags(write=False)
    return a


def _same_f64(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class JoinRequest:
    role: Role
    sample_count: int
    feature_count: int


@dataclass(frozen=True)
class JoinAck:
    status: JoinStatus


@dataclass(frozen=True, eq=False)
class ParamsPayload:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _f64(self.values))

    @property
    def param_count(self) -> int:
        return self.values.size

    def __eq__(self, other):
        return isinstance(other, ParamsPayload) and _same_f64(self.values, other.values)


@dataclass(frozen=True, eq=False)
class MatrixPayload:
    """Row-major ``rows x cols`` block tied to one training batch."""

    batch_id: int
    rows: int
    cols: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _f64(self.values))

    @classmethod
    def of(cls, batch_id: int, matrix, **extra):
        m = np.asarray(matrix, dtype=np.float64)
        return cls(batch_id=batch_id, rows=m.shape[0], cols=m.shape[1], values=m.ravel(), **extra)

    def matrix(self) -> np.ndarray:
        return self.values.reshape(self.rows, self.cols)

    def _key(self):
        return (type(self), self.batch_id, self.rows, self.cols)

    def __eq__(self, other):
        return (
            isinstance(other, MatrixPayload)
            and self._key() == other._key()
            and _same_f64(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class ActivationPayload(MatrixPayload):
    """Head-segment outputs; ``entity_checksum`` proves batch alignment."""

    entity_checksum: int = 0

    def _key(self):
        return (*super()._key(), self.entity_checksum)


@dataclass(frozen=True, eq=False)
class GradientPayload(MatrixPayload):
    pass


@dataclass(frozen=True)
class MetricsPayload:
    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((str(k), float(v)) for k, v in self.entries))

    def as_dict(self) -> dict[str, float]:
        return dict(self.entries)

    def __eq__(self, other):
        if not isinstance(other, MetricsPayload):
            return NotImplemented
        return len(self.entries) == len(other.entries) and all(
            k1 == k2 and struct.pack("<d", v1) == struct.pack("<d", v2)
            for (k1, v1), (k2, v2) in zip(self.entries, other.entries)
        )

    __hash__ = None


@dataclass(frozen=True)
class Empty:
    pass


@dataclass(frozen=True)
class ShutdownPayload:
    reason: ShutdownReason = ShutdownReason.NORMAL


Payload = Union[
    JoinRequest, JoinAck, ParamsPayload, ActivationPayload, GradientPayload,
    MetricsPayload, Empty, ShutdownPayload,
]

PAYLOAD_TYPES = {
    MsgType.JOIN_REQUEST: JoinRequest,
    MsgType.JOIN_ACK: JoinAck,
    MsgType.GLOBAL_MODEL: ParamsPayload,
    MsgType.LOCAL_UPDATE: ParamsPayload,
    MsgType.ACTIVATION_BATCH: ActivationPayload,
    MsgType.GRADIENT_BATCH: GradientPayload,
    MsgType.METRICS_REPORT: MetricsPayload,
    MsgType.ROUND_COMPLETE: ParamsPayload,
    MsgType.SHUTDOWN: ShutdownPayload,
}


@dataclass(frozen=True)
class MessageEnvelope:
    msg_type: MsgType
    round: int
    sender_id: int
    payload: Payload
    protocol_version: int = PROTOCOL_VERSION

    def __post_init__(self):
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))


# -- encoding ----------------------------------------------------------------

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_JOIN = struct.Struct("<BII")
_ACT_HEAD = struct.Struct("<IQII")
_GRAD_HEAD = struct.Struct("<III")


def _check_uint(name, value, bits):
    if not isinstance(value, (int, np.integer)) or not 0 <= int(value) < 2**bits:
        raise EncodeError(f"{name} must fit in u{bits}, got {value!r}")


def _values_bytes(values: np.ndarray) -> bytes:
    if not np.all(np.isfinite(values)):
        raise EncodeError("payload contains non-finite values")
    return values.astype("<f8", copy=False).tobytes()


def _encode_payload(msg_type: MsgType, p) -> bytes:
    expected = PAYLOAD_TYPES[msg_type]
    if type(p) is not expected:
        raise EncodeError(f"{msg_type.name} needs {expected.__name__}, got {type(p).__name__}")
    if isinstance(p, JoinRequest):
        _check_uint("sample_count", p.sample_count, 32)
        _check_uint("feature_count", p.feature_count, 32)
        return _JOIN.pack(Role(p.role), p.sample_count, p.feature_count)
    if isinstance(p, JoinAck):
        return bytes([JoinStatus(p.status)])
    if isinstance(p, ParamsPayload):
        _check_uint("param_count", p.param_count, 32)
        return _U32.pack(p.param_count) + _values_bytes(p.values)
    if isinstance(p, MatrixPayload):
        for name in ("batch_id", "rows", "cols"):
            _check_uint(name, getattr(p, name), 32)
        if p.rows * p.cols != p.values.size:
            raise EncodeError(f"{p.rows}x{p.cols} block carries {p.values.size} values")
        if isinstance(p, ActivationPayload):
            _check_uint("entity_checksum", p.entity_checksum, 64)
            head = _ACT_HEAD.pack(p.batch_id, p.entity_checksum, p.rows, p.cols)
        else:
            head = _GRAD_HEAD.pack(p.batch_id, p.rows, p.cols)
        return head + _values_bytes(p.values)
    if isinstance(p, MetricsPayload):
        _check_uint("metric count", len(p.entries), 16)
        parts = [_U16.pack(len(p.entries))]
        for key, value in p.entries:
            raw = key.encode("utf-8")
            if not 0 < len(raw) < 256:
                raise EncodeError(f"metric name must be 1..255 UTF-8 bytes: {key!r}")
            if not math.isfinite(value):
                raise EncodeError(f"metric {key!r} is not finite")
            parts.append(bytes([len(raw)]) + raw + struct.pack("<d", value))
        return b"".join(parts)
    if isinstance(p, ShutdownPayload):
        return bytes([ShutdownReason(p.reason)])
    return b""


def encode(msg: MessageEnvelope) -> bytes:
    _check_uint("protocol_version", msg.protocol_version, 8)
    _check_uint("sender_id", msg.sender_id, 16)
    _check_uint("round", msg.round, 32)
    body = _encode_payload(msg.msg_type, msg.payload)
    if len(body) > MAX_PAYLOAD:
        raise EncodeError(f"payload of {len(body)} bytes exceeds the 2^31-1 limit")
    header = HEADER.pack(MAGIC, msg.protocol_version, msg.msg_type, msg.sender_id, msg.round, len(body))
    return header + body


# -- decoding ----------------------------------------------------------------


@dataclass(frozen=True)
class FrameHeader:
    version: int
    msg_type: int
    sender_id: int
    round: int
    payload_length: int


def decode_header(data: bytes) -> FrameHeader:
    """Validate the fixed 16-byte header."""
    if len(data) < HEADER_SIZE:
        if not MAGIC.startswith(bytes(data[:4])):
            raise BadMagicError("bad magic")
        raise TruncatedFrameError(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
    magic, version, msg_type, sender_id, rnd, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version not in SUPPORTED_VERSIONS:
        raise UnsupportedVersionError(
            f"unsupported protocol version {version}", version=version, sender_id=sender_id
        )
    if msg_type not in PAYLOAD_TYPES:
        raise UnknownMessageTypeError(f"unknown message type {msg_type}")
    if length > MAX_PAYLOAD:
        raise LengthMismatchError(f"payload length {length} exceeds limit")
    return FrameHeader(version, msg_type, sender_id, rnd, length)


class _Reader:
    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise LengthMismatchError(
                f"payload ends after {len(self.buf)} bytes, field needs {self.pos + n}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def u8(self) -> int:
        return self.take(1)[0]

    def floats(self, count: int) -> np.ndarray:
        values = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise InvalidPayloadError("payload contains non-finite values")
        return values

    def finish(self):
        if self.pos != len(self.buf):
            raise LengthMismatchError(
                f"payload declares {len(self.buf)} bytes but body uses {self.pos}"
            )


def _enum(cls, value):
    try:
        return cls(value)
    except ValueError:
        raise InvalidPayloadError(f"invalid {cls.__name__} code {value}") from None


def _decode_payload(msg_type: MsgType, body: memoryview):
    r = _Reader(body)
    if msg_type is MsgType.JOIN_REQUEST:
        role, samples, features = r.unpack(_JOIN)
        p = JoinRequest(_enum(Role, role), samples, features)
    elif msg_type is MsgType.JOIN_ACK:
        p = JoinAck(_enum(JoinStatus, r.u8()))
    elif msg_type in (MsgType.GLOBAL_MODEL, MsgType.LOCAL_UPDATE, MsgType.ROUND_COMPLETE):
        (count,) = r.unpack(_U32)
        if 8 * count > len(body) - r.pos:
            raise LengthMismatchError(f"param_count {count} exceeds payload")
        p = ParamsPayload(r.floats(count))
    elif msg_type is MsgType.ACTIVATION_BATCH:
        batch_id, checksum, rows, cols = r.unpack(_ACT_HEAD)
        if rows * cols * 8 > len(body) - r.pos:
            raise LengthMismatchError(f"{rows}x{cols} block exceeds payload")
        p = ActivationPayload(batch_id, rows, cols, r.floats(rows * cols), entity_checksum=checksum)
    elif msg_type is MsgType.GRADIENT_BATCH:
        batch_id, rows, cols = r.unpack(_GRAD_HEAD)
        if rows * cols * 8 > len(body) - r.pos:
            raise LengthMismatchError(f"{rows}x{cols} block exceeds payload")
        p = GradientPayload(batch_id, rows, cols, r.floats(rows * cols))
    elif msg_type is MsgType.METRICS_REPORT:
        (count,) = r.unpack(_U16)
        entries = []
        for _ in range(count):
            size = r.u8()
            if size == 0:
                raise InvalidPayloadError("empty metric name")
            try:
                key = bytes(r.take(size)).decode("utf-8")
            except UnicodeDecodeError:
                raise InvalidPayloadError("metric name is not valid UTF-8") from None
            (value,) = struct.unpack("<d", r.take(8))
            if not math.isfinite(value):
                raise InvalidPayloadError(f"metric {key!r} is not finite")
            entries.append((key, value))
        p = MetricsPayload(tuple(entries))
    elif msg_type is MsgType.SHUTDOWN:
        p = ShutdownPayload(_enum(ShutdownReason, r.u8()))
    else:  # pragma: no cover - PAYLOAD_TYPES guards this
        raise UnknownMessageTypeError(str(msg_type))
    r.finish()
    return p


def decode(data) -> MessageEnvelope:
    """Parse exactly one frame. Total on arbitrary input: raises DecodeError subclasses."""
    data = memoryview(bytes(data))
    header = decode_header(data)
    end = HEADER_SIZE + header.payload_length
    if len(data) < end:
        raise TruncatedFrameError(
            f"frame declares {header.payload_length} payload bytes, only {len(data) - HEADER_SIZE} present"
        )
    if len(data) > end:
        raise TrailingBytesError(f"{len(data) - end} bytes after the frame")
    msg_type = MsgType(header.msg_type)
    payload = _decode_payload(msg_type, data[HEADER_SIZE:end])
    return MessageEnvelope(msg_type, header.round, header.sender_id, payload, header.version)
