"""Binary checkpoint format.

Layout (all little-endian)::

    b"MGVT"                      magic
    u32   version
    u32   n, then n bytes        JSON block: {"model": ModelConfig, "meta": {...}}
    u32   tensor count
    per tensor:
        u16 name length, name (utf-8)
        u8  ndim, then ndim x u32 dims
        prod(dims) x f64 data, row-major

Model parameters are stored under ``param/<name>``; any extra arrays (such
as optimizer moments) under other prefixes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError
from .vit import ModelConfig, ViT

MAGIC = b"MGVT"
VERSION = 1


def write_tensors(fh, arrays: Mapping[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("unexpected end of checkpoint", self.pos, self.path)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(path, model: ViT, meta: dict | None = None,
                    extra: Mapping[str, np.ndarray] | None = None) -> None:
    block = json.dumps({"model": model.config.to_dict(), "mg_flow": model.mg_flow,
                        "meta": meta or {}}, sort_keys=True).encode("utf-8")
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    for k, v in (extra or {}).items():
        arrays[k] = v
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(block)))
        fh.write(block)
        write_tensors(fh, arrays)


def load_checkpoint(path) -> tuple[ViT, dict, dict[str, np.ndarray]]:
    """Returns ``(model, meta, extra arrays)``."""
    raw = Path(path).read_bytes()
    rd = _Reader(raw, path)
    if raw[:4] != MAGIC:
        raise FormatError("bad checkpoint magic", 0, path)
    rd.take(4)
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4, path)
    (n,) = rd.unpack("<I")
    start = rd.pos
    try:
        block = json.loads(rd.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("corrupt config block", start, path)
    (count,) = rd.unpack("<I")
    arrays = {}
    for _ in range(count):
        (ln,) = rd.unpack("<H")
        name = rd.take(ln).decode("utf-8")
        (ndim,) = rd.unpack("<B")
        dims = rd.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(rd.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if rd.pos != len(raw):
        raise FormatError("trailing bytes after last tensor", rd.pos, path)
    cfg = ModelConfig(**block["model"])
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    extra = {k: v for k, v in arrays.items() if not k.startswith("param/")}
    model = ViT(cfg, params, mg_flow=bool(block.get("mg_flow", False)))
    return model, block.get("meta", {}), extra
