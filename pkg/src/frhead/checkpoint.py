"""Binary checkpoint container.

Layout (little-endian)::

    b"FRH1" | version u32 | config_len u32 | config JSON (utf-8)
    | n_param_blocks u32 | blocks... | n_optimizer_blocks u32 | blocks...

A block is ``name_len u32 | name | rank u32 | dims u32 x rank | float32 data``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"FRH1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode_blocks(blocks: Dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.off}")
        chunk = self.buf[self.off : self.off + n]
        self.off += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blocks(self) -> Dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            rank = self.u32()
            dims = struct.unpack(f"<{rank}I", self.take(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims).copy()
        return out


def encode_checkpoint(config: dict, params: Dict[str, np.ndarray], optimizer: Dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    return b"".join(
        [
            MAGIC,
            struct.pack("<2I", VERSION, len(cfg)),
            cfg,
            _encode_blocks(params),
            _encode_blocks(optimizer),
        ]
    )


def decode_checkpoint(buf: bytes) -> Tuple[dict, Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    params = r.blocks()
    optimizer = r.blocks()
    if r.off != len(buf):
        raise CheckpointError("trailing bytes after optimizer blocks")
    return config, params, optimizer


def save_checkpoint(path, config: dict, params: Dict[str, np.ndarray], optimizer: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(config, params, optimizer))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
