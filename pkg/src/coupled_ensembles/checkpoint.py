"""CEPW parameter checkpoints.

Layout (little-endian): magic ``CEPW``, u32 version, u32 segment count, then
per segment u32 branch, u16 name length, name bytes (UTF-8), u64 offset, u64
length; then the float32 payload. Trainable segments come first and form the
``ParamVector``; batch-norm running statistics follow as extra segments whose
names end in ``.running_mean`` / ``.running_var``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .params import ParamVector, Segment

MAGIC = b"CEPW"
VERSION = 1
BUFFER_SUFFIXES = (".running_mean", ".running_var")


class CheckpointError(ValueError):
    pass


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def checkpoint_bytes(params: ParamVector, buffers: list = ()) -> bytes:
    entries = [(s.branch, s.name, params.view(s)) for s in params.segments]
    entries += [(int(b), name, np.asarray(arr)) for b, name, arr in buffers]
    head = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    offset = 0
    for branch, name, arr in entries:
        encoded = name.encode("utf-8")
        head.append(struct.pack("<IH", branch, len(encoded)))
        head.append(encoded)
        head.append(struct.pack("<QQ", offset, arr.size))
        offset += arr.size
    payload = np.concatenate([np.asarray(a, dtype="<f4").ravel() for _, _, a in entries]) if entries else np.zeros(0, "<f4")
    return b"".join(head) + payload.astype("<f4").tobytes()


def write_checkpoint(path, params: ParamVector, buffers: list = ()) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, buffers))


def read_checkpoint(path) -> tuple:
    """Return ``(ParamVector, buffers)``; segment shapes are flat ``(length,)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        pos = 12
        table = []
        for _ in range(count):
            branch, name_len = struct.unpack_from("<IH", raw, pos)
            pos += 6
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            offset, length = struct.unpack_from("<QQ", raw, pos)
            pos += 16
            table.append((branch, name, offset, length))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated segment table") from exc
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    total = sum(t[3] for t in table)
    if len(raw) - pos != 4 * total:
        raise CheckpointError(f"{path}: payload holds {(len(raw) - pos) // 4} floats, table declares {total}")
    payload = np.frombuffer(raw, dtype="<f4", offset=pos).astype(np.float32)

    segments, buffers = [], []
    n_params = 0
    for branch, name, offset, length in table:
        chunk = payload[offset : offset + length]
        if is_buffer(name):
            buffers.append((branch, name, chunk.copy()))
        else:
            if buffers:
                raise CheckpointError(f"{path}: trainable segment {name!r} after buffer segments")
            segments.append(Segment(branch, name, offset, length, (length,)))
            n_params += length
    return ParamVector(payload[:n_params].copy(), segments), buffers
