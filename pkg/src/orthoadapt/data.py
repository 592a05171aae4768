"""Synthetic segmentation scenes, procedural corruptions, and continual streams.

Scenes are a background gradient (class 0) with coloured rectangles, discs
and stripes (classes 1..K-1), each class drawn near a canonical colour.
Four corruption kinds stand in for adverse-weather domains:

=======  ======================================================
fog      convex blend toward white with a smooth spatial weight
dark     brightness scaling plus gamma > 1
noise    additive Gaussian noise, clipped to [0, 1]
blur     repeated 3x3 box filter plus a mild brighten
=======  ======================================================

Severity 0 is the identity for every kind. Images are float64 (3, H, W) in
[0, 1]; labels are integer (H, W) maps. Files are binary PPM (P6) for images
and PGM (P5) for labels, maxval 255.
"""

from __future__ import annotations

import colorsys
import csv
import io
import math
import os
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng as rngmod
from .errors import ConfigurationError, FormatError

CORRUPTION_KINDS = ("fog", "dark", "noise", "blur")

MANIFEST_HEADER = "round,domain,kind,severity,seed,image_path,label_path"


@dataclass
class SegSample:
    image: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.label.shape:
            raise ConfigurationError(
                f"image {self.image.shape} and label {self.label.shape} do not align"
            )


def palette(num_classes: int) -> np.ndarray:
    """Canonical class colours: hues evenly spaced, class 0 a muted grey-blue."""
    cols = [(0.45, 0.5, 0.55)]
    for c in range(1, num_classes):
        hue = (c - 1) / max(num_classes - 1, 1)
        cols.append(colorsys.hsv_to_rgb(hue, 0.85, 0.9))
    return np.asarray(cols[:num_classes], dtype=np.float64)


def gen_scene(seed: int, H: int = 48, W: int = 64, K: int = 5) -> SegSample:
    if K < 2:
        raise ConfigurationError("need at least 2 classes")
    if H < 16 or W < 16:
        raise ConfigurationError("scenes must be at least 16x16")
    gen = np.random.default_rng(seed)
    pal = palette(K)
    yy, xx = np.mgrid[0:H, 0:W]
    yy = yy / (H - 1)
    xx = xx / (W - 1)

    direction = gen.uniform(0, 2 * np.pi)
    ramp = np.cos(direction) * xx + np.sin(direction) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    image = pal[0][:, None, None] * (0.85 + 0.25 * ramp)[None]
    label = np.zeros((H, W), dtype=np.int64)

    for _ in range(int(gen.integers(3, 7))):
        c = int(gen.integers(1, K))
        colour = np.clip(pal[c] + gen.normal(0.0, 0.04, size=3), 0.0, 1.0)
        kind = gen.integers(0, 3)
        if kind == 0:
            h, w = gen.uniform(0.15, 0.45), gen.uniform(0.15, 0.45)
            y0, x0 = gen.uniform(0, 1 - h), gen.uniform(0, 1 - w)
            region = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        elif kind == 1:
            rad = gen.uniform(0.1, 0.25)
            cy, cx = gen.uniform(0.1, 0.9), gen.uniform(0.1, 0.9)
            region = ((yy - cy) * H) ** 2 + ((xx - cx) * W) ** 2 <= (rad * min(H, W)) ** 2
        else:
            angle = gen.uniform(0, np.pi)
            offset = gen.uniform(-0.3, 0.3)
            width = gen.uniform(0.05, 0.12)
            dist = np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5) - offset
            region = np.abs(dist) < width
        image[:, region] = colour[:, None]
        label[region] = c

    image = np.clip(image + gen.normal(0.0, 0.02, size=image.shape), 0.0, 1.0)
    return SegSample(image, label)


# ------------------------------------------------------------------ corruptions


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigurationError(f"unknown corruption kind {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ConfigurationError(f"severity must lie in [0, 1], got {self.severity}")


def fog(x: np.ndarray, severity: float, weight: np.ndarray) -> np.ndarray:
    w = severity * np.asarray(weight)
    return (1.0 - w) * x + w


def smooth_field(gen: np.random.Generator, h: int, w: int, lo=0.5, hi=1.0, cells=(4, 6)) -> np.ndarray:
    from .autodiff import interp_matrix

    coarse = gen.uniform(lo, hi, size=cells)
    return interp_matrix(cells[0], h, "bilinear") @ coarse @ interp_matrix(cells[1], w, "bilinear").T


def box_blur(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = x.shape[1:]
    return sum(p[:, i : i + h, j : j + w] for i in range(3) for j in range(3)) / 9.0


def corrupt(x: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    s = spec.severity
    if s == 0.0:
        return x.copy()
    gen = np.random.default_rng(spec.seed)
    if spec.kind == "fog":
        out = fog(x, s, smooth_field(gen, *x.shape[1:]))
    elif spec.kind == "dark":
        out = (1.0 - 0.75 * s) * x ** (1.0 + 1.5 * s)
    elif spec.kind == "noise":
        out = x + gen.normal(0.0, 0.35 * s, size=x.shape)
    else:
        out = x
        for _ in range(math.ceil(4 * s)):
            out = box_blur(out)
        out = out + 0.25 * s * (1.0 - out)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------- streams


@dataclass(frozen=True)
class DomainSpec:
    name: str
    kind: str
    severity: float


DEFAULT_DOMAINS = (
    DomainSpec("fog", "fog", 0.7),
    DomainSpec("night", "dark", 0.95),
    DomainSpec("rain", "noise", 1.0),
    DomainSpec("snow", "blur", 1.0),
)


@dataclass(frozen=True)
class StreamEntry:
    round: int
    domain: str
    kind: str
    severity: float
    seed: int
    image_path: str = ""
    label_path: str = ""

    @property
    def sample_id(self) -> tuple[int, str, int]:
        return (self.round, self.domain, self.seed)


@dataclass
class DomainStream:
    entries: list[StreamEntry]
    rounds: int

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def domains(self) -> list[str]:
        seen: list[str] = []
        for e in self.entries:
            if e.domain not in seen:
                seen.append(e.domain)
        return seen

    def to_manifest(self) -> str:
        buf = io.StringIO()
        buf.write(MANIFEST_HEADER + "\n")
        w = csv.writer(buf, lineterminator="\n")
        for e in self.entries:
            w.writerow([e.round, e.domain, e.kind, repr(float(e.severity)), e.seed,
                        e.image_path, e.label_path])
        return buf.getvalue()

    @classmethod
    def from_manifest(cls, text: str) -> "DomainStream":
        lines = text.splitlines()
        if not lines or lines[0].strip() != MANIFEST_HEADER:
            raise FormatError("manifest header missing or wrong", offset=0)
        entries = []
        for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
            if not row:
                continue
            if len(row) != 7:
                raise FormatError(f"manifest line {lineno}: expected 7 fields, got {len(row)}")
            r, d, k, sev, seed, ip, lp = row
            entries.append(StreamEntry(int(r), d, k, float(sev), int(seed), ip, lp))
        rounds = max((e.round for e in entries), default=0)
        return cls(entries, rounds)

    def save(self, path) -> None:
        Path(path).write_text(self.to_manifest(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DomainStream":
        return cls.from_manifest(Path(path).read_text(encoding="utf-8"))


def _domain_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def build_stream(domains: Sequence[DomainSpec], samples_per_domain: int, rounds: int,
                 seed: int) -> DomainStream:
    """Ordered manifest: for each round, each domain in the given order, its samples.

    Sample seeds depend on (round, domain name, index) only, so reordering
    the domains permutes the sequence without changing the multiset.
    """
    if not domains:
        raise ConfigurationError("stream needs at least one domain")
    names = [d.name for d in domains]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate domain names in {names}")
    if samples_per_domain < 1 or rounds < 1:
        raise ConfigurationError("samples_per_domain and rounds must be >= 1")
    entries = []
    for r in range(1, rounds + 1):
        for d in domains:
            CorruptionSpec(d.kind, d.severity)
            for i in range(samples_per_domain):
                s = rngmod.derive_seed(seed, "data", r, _domain_key(d.name), i)
                entries.append(StreamEntry(r, d.name, d.kind, float(d.severity), s))
    return DomainStream(entries, rounds)


def cyclic_orders(domains: Sequence[DomainSpec]) -> list[list[DomainSpec]]:
    """All cyclic rotations of ``domains`` (F-N-R-S, N-R-S-F, ...)."""
    d = list(domains)
    return [d[i:] + d[:i] for i in range(len(d))]


def materialize(entry: StreamEntry, H: int = 48, W: int = 64, K: int = 5,
                base_dir: str | os.PathLike | None = None) -> SegSample:
    """The sample an entry refers to: read from disk if it has paths, else generated."""
    if entry.image_path:
        root = Path(base_dir) if base_dir is not None else Path(".")
        return load_sample(root / entry.image_path, root / entry.label_path)
    clean = gen_scene(entry.seed, H, W, K)
    spec = CorruptionSpec(entry.kind, entry.severity,
                          rngmod.derive_seed(entry.seed, "corruption"))
    return SegSample(corrupt(clean.image, spec), clean.label)


def source_seeds(seed: int, n: int, split: str = "train") -> list[int]:
    return [rngmod.derive_seed(seed, "data", _domain_key("source-" + split), i) for i in range(n)]


def source_set(seed: int, n: int, H: int = 48, W: int = 64, K: int = 5,
               split: str = "train") -> list[SegSample]:
    return [gen_scene(s, H, W, K) for s in source_seeds(seed, n, split)]


# ------------------------------------------------------------------- PPM / PGM


def quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    """(3, H, W) floats in [0, 1] -> P6 bytes."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigurationError(f"PPM needs a (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    body = quantize(image).transpose(1, 2, 0).tobytes()
    return f"P6\n{w} {h}\n255\n".encode("ascii") + body


def encode_pgm(label: np.ndarray) -> bytes:
    label = np.asarray(label)
    if label.ndim != 2 or label.min() < 0 or label.max() > 255:
        raise ConfigurationError("PGM labels must be a 2-D map with ids in [0, 255]")
    h, w = label.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + label.astype(np.uint8).tobytes()


def _parse_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, payload offset)."""
    if buf[:2] != magic:
        raise FormatError(f"expected magic {magic.decode()}, found {buf[:2]!r}", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header: expected an integer", offset=start)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte", offset=pos)
    w, h, maxval = fields
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise FormatError(f"unsupported geometry or maxval {w}x{h}/{maxval}", offset=2)
    return w, h, maxval, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    w, h, maxval, off = _parse_header(buf, b"P6")
    need = 3 * w * h
    if len(buf) - off < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - off}",
                          offset=len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / maxval


def decode_pgm(buf: bytes) -> np.ndarray:
    w, h, _, off = _parse_header(buf, b"P5")
    need = w * h
    if len(buf) - off < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - off}",
                          offset=len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(h, w).astype(np.int64)


def save_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def load_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def save_label(path, label: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(label))


def load_label(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def save_sample(image_path, label_path, sample: SegSample) -> None:
    save_image(image_path, sample.image)
    save_label(label_path, sample.label)


def load_sample(image_path, label_path) -> SegSample:
    return SegSample(load_image(image_path), load_label(label_path))
