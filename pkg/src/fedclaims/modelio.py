"""Binary model files: a network's shape, activations, seed and parameters.

Layout (little-endian)::

    magic        4 bytes  b"FCMD"
    version      u8       1
    layers       u8       L (number of weight layers)
    sizes        u32 x (L + 1)
    activations  u8 x L   0 = identity, 1 = relu
    seed         u64      initialization seed of the config
    count        u64      number of parameters
    values       f64 x count, in flatten order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ModelFileError
from .nncore import NetworkConfig, NetworkParams, flatten, unflatten

MAGIC = b"FCMD"
VERSION = 1
_ACT_CODES = {"identity": 0, "relu": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def encode_model(params: NetworkParams, seed: int = 0) -> bytes:
    sizes = params.layer_sizes
    values = flatten(params)
    out = [MAGIC, struct.pack("<BB", VERSION, len(params.layers))]
    out.append(struct.pack(f"<{len(sizes)}I", *sizes))
    out.append(bytes(_ACT_CODES[a] for a in params.activations))
    out.append(struct.pack("<QQ", seed, values.size))
    out.append(values.astype("<f8").tobytes())
    return b"".join(out)


def decode_model(data: bytes) -> tuple[NetworkParams, int]:
    """Parse a model file; returns ``(params, seed)``."""
    view = memoryview(data)
    if len(view) < 6 or bytes(view[:4]) != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    version, n_layers = struct.unpack_from("<BB", view, 4)
    if version != VERSION:
        raise ModelFileError(f"unsupported model file version {version}")
    if n_layers < 1:
        raise ModelFileError("model file declares no layers")
    pos = 6
    head = 4 * (n_layers + 1) + n_layers + 16
    if len(view) < pos + head:
        raise ModelFileError("model file truncated in header")
    sizes = struct.unpack_from(f"<{n_layers + 1}I", view, pos)
    pos += 4 * (n_layers + 1)
    codes = bytes(view[pos : pos + n_layers])
    pos += n_layers
    if any(c not in _ACT_NAMES for c in codes):
        raise ModelFileError(f"unknown activation code in {list(codes)}")
    seed, count = struct.unpack_from("<QQ", view, pos)
    pos += 16
    acts = [_ACT_NAMES[c] for c in codes]
    try:
        config = NetworkConfig(list(sizes), acts[:-1], seed=seed, output_activation=acts[-1])
    except ValueError as exc:
        raise ModelFileError(f"invalid network shape: {exc}") from None
    if count != config.param_count:
        raise ModelFileError(f"{count} parameters recorded, shape needs {config.param_count}")
    if len(view) != pos + 8 * count:
        raise ModelFileError(f"expected {pos + 8 * count} bytes, found {len(view)}")
    values = np.frombuffer(view[pos:], dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise ModelFileError("model file contains non-finite parameters")
    return unflatten(values, config), seed


def save_model(path, params: NetworkParams, seed: int = 0) -> None:
    Path(path).write_bytes(encode_model(params, seed))


def load_model(path) -> tuple[NetworkParams, int]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFileError(f"{path}: {exc.strerror or exc}") from None
    try:
        return decode_model(data)
    except ModelFileError as exc:
        raise ModelFileError(f"{path}: {exc}") from None
