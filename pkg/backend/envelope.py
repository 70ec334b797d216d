#!/usr/bin/env python3
"""
envelope.py — Flat binary envelopes shared by every module that persists arrays.

Two magics, one layout:
  VFLD1   datasets and model checkpoints
  VFLT1   gradient traces, adversarial embeddings, fitted detector statistics

Layout (all little-endian):
  magic[5] | u32 section_count | sections...
  section: u16 name_len | name (utf-8) | u32 ndim | u64 dims[ndim] | float64 data (row-major)

Sections keep their insertion order so that identical inputs give identical bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from errors import InputError

MAGIC_DATA = b"VFLD1"
MAGIC_TRACE = b"VFLT1"
MAGICS = (MAGIC_DATA, MAGIC_TRACE)

_F64 = np.dtype("<f8")


def encode(magic: bytes, sections: Mapping[str, np.ndarray]) -> bytes:
    if magic not in MAGICS:
        raise InputError(f"unknown envelope magic {magic!r}")
    parts = [magic, struct.pack("<I", len(sections))]
    for name, values in sections.items():
        arr = np.ascontiguousarray(values, dtype=_F64)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode(blob: bytes, magic: bytes | None = None) -> Tuple[bytes, Dict[str, np.ndarray]]:
    head = blob[:5]
    if head not in MAGICS or (magic is not None and head != magic):
        raise InputError(f"bad envelope magic {head!r}")
    offset = 5
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    sections: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
            offset += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            nbytes = size * 8
            if offset + nbytes > len(blob):
                raise InputError(f"section {name!r} truncated")
            arr = np.frombuffer(blob, dtype=_F64, count=size, offset=offset).reshape(shape)
            offset += nbytes
            sections[name] = arr.astype(np.float64, copy=True)
    except struct.error as e:
        raise InputError(f"truncated envelope: {e}") from e
    return head, sections


def write_envelope(path: Union[str, Path], magic: bytes,
                   sections: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(magic, sections))
    return path


def read_envelope(path: Union[str, Path],
                  magic: bytes | None = None) -> Tuple[bytes, Dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
