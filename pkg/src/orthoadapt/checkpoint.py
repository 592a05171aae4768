"""Versioned binary checkpoints for SegNet models, with or without adapters.

Layout (all integers little-endian)::

    magic     8 bytes   b"OACKPT\\r\\n"
    version   u32       1
    meta_len  u32       length of the metadata block
    meta      bytes     UTF-8 JSON, keys sorted, no whitespace
    count     u32       number of tensors
    count x tensor:
        name_len  u16
        name      bytes (UTF-8)
        dtype     u8      1 = float64
        rank      u8
        extents   rank x u64
        payload   prod(extents) x float64 little-endian, C order

The metadata records the architecture (``num_classes``, ``width``,
``in_ch``) and, if adapters are present, the adapted layer names and rank,
which is enough to rebuild the module tree before the tensors are loaded.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .adapters import PlacementSpec, adapted_layers, inject_adapters
from .errors import FormatError
from .models import SegNet

MAGIC = b"OACKPT\r\n"
VERSION = 1
DTYPE_F64 = 1


def model_metadata(model: SegNet) -> dict:
    layers = adapted_layers(model)
    meta = {
        "arch": "SegNet",
        "num_classes": model.num_classes,
        "width": model.width,
        "in_ch": model.in_ch,
        "adapters": None,
    }
    if layers:
        ranks = {m.adapter.rank for _, m in layers}
        if len(ranks) != 1:
            raise FormatError(f"mixed adapter ranks {sorted(ranks)} are not representable")
        meta["adapters"] = {"layers": [n for n, _ in layers], "rank": ranks.pop()}
    return meta


def encode(model: SegNet, extra: dict | None = None) -> bytes:
    meta = model_metadata(model)
    if extra:
        meta["extra"] = extra
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    params = list(model.named_parameters())
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(params))]
    for name, p in params:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", DTYPE_F64, p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (metadata, ordered name -> array)."""
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", offset=0)
    version, meta_len = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(MAGIC))
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}", offset=meta_at) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        at = r.pos
        dtype, rank = r.unpack("<BB", f"{name} header")
        if dtype != DTYPE_F64:
            raise FormatError(f"{name}: unsupported dtype tag {dtype}", offset=at)
        shape = r.unpack(f"<{rank}Q", f"{name} extents")
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(8 * n, f"{name} payload"), dtype="<f8")
        tensors[name] = data.astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last tensor", offset=r.pos)
    return meta, tensors


def build_model(meta: dict) -> SegNet:
    if meta.get("arch") != "SegNet":
        raise FormatError(f"unknown architecture {meta.get('arch')!r}")
    model = SegNet(meta["num_classes"], meta["width"], meta["in_ch"])
    ad_meta = meta.get("adapters")
    if ad_meta:
        inject_adapters(model, PlacementSpec(ad_meta["layers"]), ad_meta["rank"])
    return model


def save(path, model: SegNet, extra: dict | None = None) -> None:
    Path(path).write_bytes(encode(model, extra))


def load(path) -> tuple[SegNet, dict]:
    """Rebuild the model stored at ``path``; returns (model, metadata)."""
    meta, tensors = decode(Path(path).read_bytes())
    model = build_model(meta)
    try:
        model.load_state_dict(tensors)
    except KeyError as exc:
        raise FormatError(f"tensor set does not match the recorded architecture: {exc}") from None
    return model, meta
