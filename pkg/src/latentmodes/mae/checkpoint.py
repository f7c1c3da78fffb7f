"""Binary model checkpoints.

Layout (little-endian): magic ``LMCK``, u16 version, u32 config length,
config JSON, u32 parameter count, then per parameter: u16 name length,
UTF-8 name, u8 ndim, ndim x u32 dims, float64 payload.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .model import MaeConfig, MaeModel

MAGIC = b"LMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: MaeModel) -> None:
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        data = model.params[name].data
        raw = name.encode()
        parts.append(struct.pack("<HB", len(raw), data.ndim) + raw)
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> MaeModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        chunk = buf[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, cfg_len = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = MaeConfig(**json.loads(take(cfg_len)))
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        name_len, ndim = struct.unpack("<HB", take(3))
        name = take(name_len).decode()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if off != len(buf):
        raise CheckpointError(f"trailing bytes after parameter table at byte {off}")
    model = MaeModel(cfg)
    model.load_state_dict(state)
    return model
