"""Signal file formats.

PGM: binary P5, maxval 65535, big-endian samples, with a ``# range <min> <max>``
comment recording the linear map back to real values. Quantized, so only
suitable for viewing.

BDM1: 16-byte header (magic ``BDM1``, uint32 ndim, uint32 dim0, uint32 dim1;
dim1 = 1 for 1D) followed by little-endian float64 values in row-major order.
Bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

BDM1_MAGIC = b"BDM1"
PGM_MAXVAL = 65535


def write_pgm(path, signal) -> None:
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("PGM holds 1D or 2D signals only")
    lo, hi = float(x.min()), float(x.max())
    span = hi - lo
    q = np.zeros(x.shape) if span == 0 else (x - lo) / span
    data = np.round(q * PGM_MAXVAL).astype(">u2")
    h, w = x.shape
    header = f"P5\n# range {lo!r} {hi!r}\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Return a 2D float array (height 1 for signals written from 1D)."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    lo = hi = None
    pos = 0
    while len(tokens) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end]
        pos = end + 1
        if line.startswith(b"#"):
            parts = line[1:].split()
            if len(parts) == 3 and parts[0] == b"range":
                lo, hi = float(parts[1]), float(parts[2])
            continue
        tokens.extend(line.split())
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    q = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    q = q.astype(np.float64) / maxval
    if lo is None:
        return q
    return lo + q * (hi - lo)


def write_bdm1(path, signal) -> None:
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim not in (1, 2):
        raise ValueError("BDM1 holds 1D or 2D signals only")
    d0 = x.shape[0]
    d1 = x.shape[1] if x.ndim == 2 else 1
    header = BDM1_MAGIC + struct.pack("<III", x.ndim, d0, d1)
    Path(path).write_bytes(header + np.ascontiguousarray(x).astype("<f8").tobytes())


def read_bdm1(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != BDM1_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    ndim, d0, d1 = struct.unpack("<III", raw[4:16])
    shape = (d0,) if ndim == 1 else (d0, d1)
    n = d0 * d1
    if len(raw) != 16 + 8 * n:
        raise ValueError(f"{path}: expected {n} values, file has {(len(raw) - 16) // 8}")
    return np.frombuffer(raw, dtype="<f8", offset=16).reshape(shape).astype(np.float64)
