"""Random envelope generation shared by protocol tests and the acceptance run."""

import random
import struct

import numpy as np

from fedclaims.transport.codec import (
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
    encode,
)


def _finite(rng: random.Random) -> float:
    while True:
        kind = rng.random()
        if kind < 0.1:
            return rng.choice([0.0, -0.0, 1.0, -1.0, 5e-324, 1.7976931348623157e308])
        if kind < 0.5:
            return rng.uniform(-1e6, 1e6)
        v = struct.unpack("<d", rng.getrandbits(64).to_bytes(8, "little"))[0]
        if np.isfinite(v):
            return v


def _floats(rng, n):
    return np.array([_finite(rng) for _ in range(n)])


def random_payload(rng: random.Random, msg_type: MsgType):
    if msg_type is MsgType.JOIN_REQUEST:
        return JoinRequest(rng.choice(list(Role)), rng.getrandbits(32), rng.getrandbits(32))
    if msg_type is MsgType.JOIN_ACK:
        return JoinAck(rng.choice(list(JoinStatus)))
    if msg_type in (MsgType.GLOBAL_MODEL, MsgType.LOCAL_UPDATE, MsgType.ROUND_COMPLETE):
        return ParamsPayload(_floats(rng, rng.randrange(0, 12)))
    if msg_type in (MsgType.ACTIVATION_BATCH, MsgType.GRADIENT_BATCH):
        rows, cols = rng.randrange(0, 4), rng.randrange(0, 4)
        values = _floats(rng, rows * cols).reshape(rows, cols)
        if msg_type is MsgType.ACTIVATION_BATCH:
            return ActivationPayload.of(rng.getrandbits(32), values, entity_checksum=rng.getrandbits(64))
        return GradientPayload.of(rng.getrandbits(32), values)
    if msg_type is MsgType.METRICS_REPORT:
        entries = []
        for _ in range(rng.randrange(0, 4)):
            key = "".join(rng.choice("abcxyz_é中") for _ in range(rng.randrange(1, 8)))
            entries.append((key, _finite(rng)))
        return MetricsPayload(tuple(entries))
    if msg_type is MsgType.SHUTDOWN:
        return ShutdownPayload(rng.choice(list(ShutdownReason)))
    return Empty()


def random_envelope(rng: random.Random) -> MessageEnvelope:
    msg_type = rng.choice(list(MsgType))
    return MessageEnvelope(
        msg_type, rng.getrandbits(32), rng.getrandbits(16), random_payload(rng, msg_type)
    )


def mutate(rng: random.Random, frame: bytes) -> bytes:
    """Flip, drop, insert or truncate bytes of a valid frame."""
    data = bytearray(frame)
    for _ in range(rng.randrange(1, 4)):
        op = rng.random()
        if op < 0.4 and data:
            data[rng.randrange(len(data))] = rng.getrandbits(8)
        elif op < 0.6 and data:
            del data[rng.randrange(len(data))]
        elif op < 0.8:
            data.insert(rng.randrange(len(data) + 1), rng.getrandbits(8))
        else:
            data = data[: rng.randrange(len(data) + 1)]
    return bytes(data)


def golden_envelopes():
    """Fixed envelopes whose encodings are checked into tests/golden/."""
    return {
        "global_model_one": MessageEnvelope(MsgType.GLOBAL_MODEL, 5, 0, ParamsPayload([1.0])),
        "join_request": MessageEnvelope(MsgType.JOIN_REQUEST, 0, 2, JoinRequest(Role.COLLABORATOR, 4000, 8)),
        "join_ack_version": MessageEnvelope(MsgType.JOIN_ACK, 0, 0, JoinAck(JoinStatus.VERSION_MISMATCH)),
        "local_update": MessageEnvelope(MsgType.LOCAL_UPDATE, 3, 1, ParamsPayload([0.5, -2.0, 0.0])),
        "activation_batch": MessageEnvelope(
            MsgType.ACTIVATION_BATCH, 0, 2,
            ActivationPayload.of(7, [[1.0, 2.0], [3.0, 4.0]], entity_checksum=0x0123456789ABCDEF),
        ),
        "gradient_batch": MessageEnvelope(MsgType.GRADIENT_BATCH, 0, 1, GradientPayload.of(7, [[0.25], [-0.25]])),
        "metrics_report": MessageEnvelope(
            MsgType.METRICS_REPORT, 2, 1, MetricsPayload((("train_mse", 1.5), ("train_pe", -0.125)))
        ),
        "round_complete": MessageEnvelope(MsgType.ROUND_COMPLETE, 9, 0, ParamsPayload([])),
        "shutdown": MessageEnvelope(MsgType.SHUTDOWN, 30, 0, ShutdownPayload(ShutdownReason.NORMAL)),
    }


if __name__ == "__main__":
    from pathlib import Path

    out = Path(__file__).parent / "golden"
    out.mkdir(exist_ok=True)
    for name, env in golden_envelopes().items():
        (out / f"{name}.bin").write_bytes(encode(env))
