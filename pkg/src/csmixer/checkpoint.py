"""Framed little-endian binary checkpoints.

Layout::

    b"CSMX"  u32 version  u64 header_len  header (UTF-8 JSON, sorted keys)
    u32 n_tables, then per table:
        u16 name_len  name  u32 n_records, then per record:
            u16 name_len  name  u8 ndim  u32 dims[ndim]  f64 data[prod(dims)]
    b"END!"

Tables are ``params``, and when present ``ema``, ``adam.m`` and ``adam.v``.
Everything needed to resume (config, optimizer step, RNG state, epoch) sits in
the header.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig

MAGIC = b"CSMX"
TRAILER = b"END!"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None = None
    adam_m: dict[str, np.ndarray] | None = None
    adam_v: dict[str, np.ndarray] | None = None
    header: dict = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return int(self.header.get("epoch", 0))

    @property
    def rng_state(self) -> dict | None:
        return self.header.get("rng_state")


def _write_table(buf: io.BytesIO, name: str, arrays: dict[str, np.ndarray]) -> None:
    nb = name.encode()
    buf.write(struct.pack("<H", len(nb)) + nb)
    buf.write(struct.pack("<I", len(arrays)))
    for key, arr in arrays.items():
        kb = key.encode()
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<H", len(kb)) + kb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


def encode(ckpt: Checkpoint) -> bytes:
    header = dict(ckpt.header)
    header["config"] = ckpt.config.to_dict()
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb)
    tables = [("params", ckpt.params)]
    for name, t in (("ema", ckpt.ema), ("adam.m", ckpt.adam_m), ("adam.v", ckpt.adam_v)):
        if t is not None:
            tables.append((name, t))
    buf.write(struct.pack("<I", len(tables)))
    for name, t in tables:
        _write_table(buf, name, t)
    buf.write(TRAILER)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte offset {self.pos} "
                                  f"(wanted {n} bytes, file has {len(self.data)})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a CSMX checkpoint")
    version, hlen = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    header = json.loads(r.take(hlen).decode())
    config = ModelConfig.from_dict(header.pop("config"))
    tables: dict[str, dict[str, np.ndarray]] = {}
    (n_tables,) = r.unpack("<I")
    for _ in range(n_tables):
        (nl,) = r.unpack("<H")
        tname = r.take(nl).decode()
        (count,) = r.unpack("<I")
        table: dict[str, np.ndarray] = {}
        for _ in range(count):
            (kl,) = r.unpack("<H")
            key = r.take(kl).decode()
            if key in table:
                raise CheckpointError(f"duplicate parameter name {key!r} in table {tname!r}")
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
            table[key] = arr
        tables[tname] = table
    if r.take(4) != TRAILER:
        raise CheckpointError(f"missing trailer at byte offset {r.pos - 4}")
    if r.pos != len(data):
        raise CheckpointError(f"trailing bytes after offset {r.pos}")
    return Checkpoint(config, tables["params"], tables.get("ema"), tables.get("adam.m"),
                      tables.get("adam.v"), header)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


def check_compatible(ckpt_params: dict[str, np.ndarray], shapes: dict[str, tuple]) -> None:
    """Raise naming the first parameter whose name or shape differs from ``shapes``."""
    for name, arr in ckpt_params.items():
        if name not in shapes:
            raise CheckpointError(f"unknown parameter name {name!r} in checkpoint")
        if tuple(arr.shape) != tuple(shapes[name]):
            raise CheckpointError(
                f"shape mismatch for parameter {name!r}: checkpoint {tuple(arr.shape)} "
                f"vs model {tuple(shapes[name])}")
    missing = [n for n in shapes if n not in ckpt_params]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter {missing[0]!r}")


def from_model(model, **header) -> Checkpoint:
    return Checkpoint(model.config, {k: v.data.copy() for k, v in model.params.items()},
                      header=header)


def load_into(model, ckpt: Checkpoint) -> None:
    check_compatible(ckpt.params, {k: v.shape for k, v in model.params.items()})
    model.load_arrays(ckpt.params)
