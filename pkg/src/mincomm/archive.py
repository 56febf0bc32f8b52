"""Artifact file formats.

Matrix archive (.mtxz): a flat container of named dense matrices in a fixed
little-endian binary layout with no external dependencies:

    magic bytes  b"MCSLS1"
    per entry:   name length  uint32
                 name         utf-8 bytes
                 rows, cols   uint64 each
                 data         rows*cols float64, row-major

Entries repeat until end of file.  Schedules and reports are plain JSON.
"""

from __future__ import annotations

import json
import struct
from typing import Dict

import numpy as np

__all__ = [
    "MAGIC",
    "write_archive",
    "read_archive",
    "schedules_to_json",
    "schedules_from_json",
]

MAGIC = b"MCSLS1"


def write_archive(path, matrices: Dict[str, np.ndarray]):
    """Write named matrices; insertion order is preserved on disk."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, M in matrices.items():
            M = np.ascontiguousarray(np.atleast_2d(np.asarray(M, dtype="<f8")))
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<QQ", M.shape[0], M.shape[1]))
            f.write(M.tobytes(order="C"))


def read_archive(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a matrix archive (bad magic bytes)")
    out: Dict[str, np.ndarray] = {}
    off = len(MAGIC)
    while off < len(data):
        if off + 4 > len(data):
            raise ValueError(f"{path}: truncated entry header")
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        rows, cols = struct.unpack_from("<QQ", data, off)
        off += 16
        count = rows * cols
        end = off + 8 * count
        if end > len(data):
            raise ValueError(f"{path}: truncated data for entry {name!r}")
        out[name] = np.frombuffer(data[off:end], dtype="<f8").reshape(rows, cols).copy()
        off = end
    return out


def schedules_to_json(schedules) -> list:
    return [
        {
            "receiver": s.receiver,
            "sender": s.sender,
            "delay": s.delay,
            "times": list(s.times),
            "encoder": s.encoder.tolist(),
            "decoder": s.decoder.tolist(),
            "input_dim": s.input_dim,
            "meas_dim": s.meas_dim,
            "diagnostics": list(s.diagnostics),
        }
        for s in schedules
    ]


def schedules_from_json(entries) -> list:
    from .factorization import MessageSchedule

    out = []
    for e in entries:
        r = len(e["times"])
        decoder = np.asarray(e["decoder"], dtype=float).reshape(len(e["decoder"]), r)
        horizon_blocks = decoder.shape[0] // e["input_dim"]
        cols = horizon_blocks * e["meas_dim"]
        encoder = np.asarray(e["encoder"], dtype=float).reshape(r, cols)
        out.append(
            MessageSchedule(
                receiver=e["receiver"],
                sender=e["sender"],
                delay=e["delay"],
                times=tuple(e["times"]),
                encoder=encoder,
                decoder=decoder,
                input_dim=e["input_dim"],
                meas_dim=e["meas_dim"],
                diagnostics=tuple(e.get("diagnostics", ())),
            )
        )
    return out
