"""Flat binary parameter checkpoints.

Layout (little endian): ``b"FETW"``, u32 count, then per entry u16 name length,
UTF-8 name, u8 rank, ``rank`` x u32 extents, float64 data in C order.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import NotFound, ParseError

MAGIC = b"FETW"


def save_checkpoint(path, state):
    chunks = [MAGIC, struct.pack("<I", len(state))]
    for name, value in state.items():
        arr = np.asarray(value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise NotFound(f"checkpoint {path} not found") from None
    if raw[:4] != MAGIC:
        raise ParseError(f"{path}: not a FETW checkpoint", offset=0)
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        state = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(raw):
                raise struct.error("truncated data")
            state[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise ParseError(f"{path}: {exc}", offset=pos) from None
    return state
