"""Versioned binary checkpoints.

Layout (little-endian):
    magic "SGMC" | u32 version | u32 rng-record length | rng record (JSON utf-8)
    | tensor table (parameters) | tensor table (optimizer state)

A tensor table is a u32 entry count followed by entries of
    u16 name length | name utf-8 | u8 ndim | u32 dim... | float64 raw values.

Values are always written at 64-bit precision regardless of the training
dtype. The RNG record carries the master seed plus whatever phase/epoch
bookkeeping the trainer wants to resume from.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .numerics import ConfigurationError, ParamSet

MAGIC = b"SGMC"
FORMAT_VERSION = 1


def _write_table(out: bytearray, entries: dict[str, np.ndarray]) -> None:
    out += struct.pack("<I", len(entries))
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype=np.float64)
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw))
        out += raw
        out += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<I", dim)
        out += arr.tobytes()


def _read_table(buf: bytes, off: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape.append(dim)
        n = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape)
        off += n * 8
        entries[name] = values.copy()
    return entries, off


def save_checkpoint(path, params: ParamSet, rng_record: dict) -> None:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    record = json.dumps(rng_record, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(record))
    out += record
    _write_table(out, {name: t.data for name, t in params.items()})
    _write_table(out, {name: params.rms_state(name) for name in params.names()})
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    (rlen,) = struct.unpack_from("<I", buf, 8)
    off = 12
    rng_record = json.loads(buf[off : off + rlen].decode("utf-8"))
    off += rlen
    tensors, off = _read_table(buf, off)
    rms, off = _read_table(buf, off)
    params = ParamSet()
    for name, arr in tensors.items():
        params.add(name, arr)
    for name, arr in rms.items():
        if name not in params:
            raise ConfigurationError(f"{path}: optimizer state for unknown tensor {name!r}")
        params.set_rms_state(name, arr)
    return params, rng_record


def checkpoint_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
