"""Minimal MGT1 container codec.

Implements the published byte layout so dumps written here are accepted
by the analysis toolkit without importing it:

    bytes 0..3      magic ``MGT1``
    bytes 4..11     uint64 LE header byte length H
    next H bytes    UTF-8 JSON header
    next 8 bytes    uint64 LE index byte length I
    next I bytes    UTF-8 JSON index: array of [name, offset, length]
    payload         first 64-byte-aligned offset after the index; index
                    offsets are relative to it and 64-byte aligned

Tensors are little-endian floats ("f4" or "f8"), row-major, described by
the header's ``sections`` map: name -> {"dtype", "shape"}.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MGT1"
ALIGNMENT = 64
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}
_NAMES = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}


class Mgt1Error(RuntimeError):
    pass


def _aligned(n: int) -> int:
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def write(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    header = dict(header)
    sections = {}
    blobs = []
    for name, t in tensors.items():
        t = np.ascontiguousarray(t)
        if t.dtype not in _NAMES:
            raise Mgt1Error(f"unsupported dtype {t.dtype} for {name!r}")
        dname = _NAMES[t.dtype]
        sections[name] = {"dtype": dname, "shape": list(t.shape)}
        blobs.append((name, t.astype(_DTYPES[dname], copy=False).tobytes()))
    header["format"] = "MGT1"
    header["version"] = 1
    header["sections"] = sections
    hb = json.dumps(header, sort_keys=True).encode()

    index = []
    off = 0
    for name, raw in blobs:
        off = _aligned(off)
        index.append([name, off, len(raw)])
        off += len(raw)
    ib = json.dumps(index).encode()

    out = bytearray(MAGIC)
    out += struct.pack("<Q", len(hb)) + hb
    out += struct.pack("<Q", len(ib)) + ib
    base = _aligned(len(out))
    out += b"\0" * (base - len(out))
    for (name, raw), (_, rel, _) in zip(blobs, index):
        out += b"\0" * (base + rel - len(out))
        out += raw
    return bytes(out)


def read(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise Mgt1Error("not an MGT1 file")
    (hlen,) = struct.unpack_from("<Q", data, 4)
    header = json.loads(data[12:12 + hlen])
    istart = 12 + hlen
    (ilen,) = struct.unpack_from("<Q", data, istart)
    index = json.loads(data[istart + 8:istart + 8 + ilen])
    base = _aligned(istart + 8 + ilen)
    tensors = {}
    for name, rel, length in index:
        meta = header.get("sections", {}).get(name)
        if meta is None:
            continue
        dtype = _DTYPES[meta["dtype"]]
        shape = tuple(meta["shape"])
        raw = data[base + rel:base + rel + length]
        if len(raw) != length:
            raise Mgt1Error(f"truncated section {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return header, tensors


def save(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(write(header, tensors))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return read(Path(path).read_bytes())
