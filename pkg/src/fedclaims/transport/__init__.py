"""Federation message protocol and channels."""

from .channels import (
    DEFAULT_TIMEOUT,
    Endpoint,
    InprocEndpoint,
    Listener,
    PrefetchedEndpoint,
    SocketEndpoint,
    accept_by_sender,
    dial,
    listen,
    open_inproc_pair,
)
from .codec import (
    MAGIC,
    PROTOCOL_VERSION,
    ActivationPayload,
    Empty,
    GradientPayload,
    JoinAck,
    JoinRequest,
    JoinStatus,
    MessageEnvelope,
    MetricsPayload,
    MsgType,
    ParamsPayload,
    Role,
    ShutdownPayload,
    ShutdownReason,
    decode,
    encode,
)

__all__ = [
    "DEFAULT_TIMEOUT", "Endpoint", "InprocEndpoint", "Listener", "PrefetchedEndpoint", "SocketEndpoint",
    "accept_by_sender", "dial", "listen", "open_inproc_pair", "MAGIC", "PROTOCOL_VERSION",
    "ActivationPayload", "Empty", "GradientPayload", "JoinAck", "JoinRequest",
    "JoinStatus", "MessageEnvelope", "MetricsPayload", "MsgType", "ParamsPayload",
    "Role", "ShutdownPayload", "ShutdownReason", "decode", "encode",
]
