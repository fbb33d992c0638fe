"""Config text files and the binary checkpoint container.

Config: one ``key = value`` per line, ``#`` comments and blank lines ignored.
Keys are the :class:`TrainConfig` fields plus ``out_dir``; anything else is an error.

Checkpoint: magic ``BDMCKPT1``, a version byte, a uint32 section count, then
named sections. Each section is ``uint32 name length, name, uint8 kind`` and
either a float64 array (``uint8 ndim``, uint32 dims, little-endian data) or a
UTF-8 text blob (``uint64 length``, bytes). Arrays are stored, never
re-derived, so a load is bit-exact.
"""

from __future__ import annotations

import csv
import io as _io
import struct
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .nets import Params
from .schedule import Schedule
from .train import Checkpoint, TrainConfig

CKPT_MAGIC = b"BDMCKPT1"
CKPT_VERSION = 1
_ARRAY, _TEXT = 0, 1

EXTRA_KEYS = {"out_dir": "out"}


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------- config

def _parse_value(key: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "1")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


def _field_types() -> dict:
    defaults = asdict(TrainConfig())
    types = {k: type(v) for k, v in defaults.items()}
    types.update({k: str for k in EXTRA_KEYS})
    return types


def parse_config(text: str) -> tuple[TrainConfig, dict]:
    """Return the training config and the extra (non-training) settings."""
    types = _field_types()
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, types[key])
    extra = {k: values.pop(k, default) for k, default in EXTRA_KEYS.items()}
    try:
        cfg = TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, extra


def format_config(cfg: TrainConfig, extra: dict | None = None) -> str:
    extra = {**EXTRA_KEYS, **(extra or {})}
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    lines.extend(f"{k} = {extra[k]}" for k in EXTRA_KEYS)
    return "\n".join(lines) + "\n"


def load_config(path) -> tuple[TrainConfig, dict]:
    return parse_config(Path(path).read_text())


# ----------------------------------------------------------------------------- checkpoint

def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return (struct.pack("<BB", _ARRAY, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
            + a.tobytes())


def _pack_text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<BQ", _TEXT, len(b)) + b


def history_csv(history: list) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "epoch", "term", "value"])
    for stage, epoch, term, value in history:
        w.writerow([stage, epoch, term, repr(float(value))])
    return buf.getvalue()


def parse_history(text: str) -> list:
    rows = list(csv.reader(_io.StringIO(text)))
    return [(int(r[0]), int(r[1]), r[2], float(r[3])) for r in rows[1:]]


def checkpoint_sections(ckpt: Checkpoint) -> dict:
    sections: dict = {
        "meta": f"stage = {ckpt.stage}\n",
        "config": format_config(ckpt.config),
        "history": history_csv(ckpt.history),
    }
    if ckpt.schedule is not None:
        s = ckpt.schedule
        sections["schedule/alpha"] = s.alpha
        sections["schedule/beta"] = s.beta
        sections["schedule/beta_bar"] = s.beta_bar
    for block, params in ckpt.blocks.items():
        for key, value in params.items():
            sections[f"params/{block}/{key}"] = value
    if ckpt.zs_targets is not None:
        sections["zs_targets"] = ckpt.zs_targets
    return sections


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    sections = checkpoint_sections(ckpt)
    out = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(sections))]
    for name, value in sections.items():
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(_pack_text(value) if isinstance(value, str) else _pack_array(value))
    Path(path).write_bytes(b"".join(out))


def read_sections(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {raw[:8]!r})")
    version, count = struct.unpack_from("<BI", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    pos = 13
    sections = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        name = raw[pos + 4:pos + 4 + n].decode("utf-8")
        pos += 4 + n
        kind = raw[pos]
        if kind == _TEXT:
            (size,) = struct.unpack_from("<Q", raw, pos + 1)
            pos += 9
            sections[name] = raw[pos:pos + size].decode("utf-8")
            pos += size
        elif kind == _ARRAY:
            ndim = raw[pos + 1]
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 2)
            pos += 2 + 4 * ndim
            size = int(np.prod(shape)) * 8
            sections[name] = np.frombuffer(raw[pos:pos + size], dtype="<f8").reshape(shape).copy()
            pos += size
        else:
            raise ValueError(f"{path}: section {name!r} has unknown kind {kind}")
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return sections


def load_checkpoint(path) -> Checkpoint:
    sec = read_sections(path)
    cfg, _ = parse_config(sec["config"])
    stage = int(sec["meta"].split("=")[1])
    schedule = None
    if "schedule/alpha" in sec:
        alpha = sec["schedule/alpha"]
        schedule = Schedule(alpha.size - 1, alpha, sec["schedule/beta"], sec["schedule/beta_bar"])
    blocks: dict = {}
    for name, value in sec.items():
        if name.startswith("params/"):
            _, block, key = name.split("/", 2)
            blocks.setdefault(block, Params())[key] = value
    return Checkpoint(cfg, stage, blocks, schedule, parse_history(sec["history"]),
                      sec.get("zs_targets"))
