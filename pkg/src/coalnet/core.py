"""Shared types: images, class labels, deterministic RNG, PGM IO, manifests."""

from __future__ import annotations

import csv
import enum
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError

# Float64 ndarray, used for images, feature maps, weights and gradients alike.
Tensor = np.ndarray

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class ClassLabel(enum.IntEnum):
    GANGUE = 0
    MATT_COAL = 1
    GLOSS_COAL = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str) -> "ClassLabel":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise FormatError(f"unknown class label {name!r}") from None


CLASS_NAMES: tuple[str, ...] = tuple(c.label for c in ClassLabel)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once. Returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Rng:
    """Splitmix64 generator.

    Bulk draws are vectorised: splitmix64 advances its state by a fixed
    increment, so the k-th future output is a pure function of
    ``state + k * gamma`` and a block of n outputs can be produced at once
    without changing the sequence.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._state = self.seed

    def next_u64(self) -> int:
        self._state, out = splitmix64(self._state)
        return out

    def u64(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self._state) + steps * _GOLDEN
            out = _mix(states)
        self._state = (self._state + n * 0x9E3779B97F4A7C15) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """n floats in [0, 1) with 53 random bits each."""
        return (self.u64(n) >> _U64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int) -> np.ndarray:
        """n standard normal draws by the Box-Muller transform."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(2.0 * math.pi * u2)
        out[1::2] = r * np.sin(2.0 * math.pi * u2)
        return out[:n]

    def integers(self, low: int, high: int, n: int | None = None):
        """Integers in [low, high). Scalar when n is None."""
        if high <= low:
            raise ValueError("empty integer range")
        u = self.uniform(1 if n is None else n)
        vals = low + np.floor(u * (high - low)).astype(np.int64)
        return int(vals[0]) if n is None else vals

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.u64(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in draw order."""
        return self.permutation(n)[:k]

    def spawn(self, stream: int) -> "Rng":
        """Independent child generator keyed by ``stream``; does not advance self."""
        _, a = splitmix64(self.seed ^ ((stream * 0xD1B54A32D192ED03) & _MASK64))
        return Rng(a)


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit grayscale raster stored as a read-only (height, width) array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"GrayImage needs a non-empty 2-D array, got shape {px.shape}")
        px = np.ascontiguousarray(px, dtype=np.uint8).copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_values(cls, width: int, height: int, values: Iterable[int]) -> "GrayImage":
        arr = np.asarray(list(values), dtype=np.int64)
        if arr.size != width * height:
            raise ValueError("pixel count does not match width*height")
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
            raise ValueError("pixel values must lie in 0..255")
        return cls(arr.reshape(height, width))

    @classmethod
    def filled(cls, width: int, height: int, value: int) -> "GrayImage":
        return cls(np.full((height, width), value, dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __repr__(self):
        return f"GrayImage({self.width}x{self.height})"


def quantize(values: np.ndarray) -> np.ndarray:
    """Round half up and clamp to u8."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def tensor_from_image(img: GrayImage) -> Tensor:
    """Shape [1, height, width] tensor with values pixel/255."""
    return (img.pixels.astype(np.float64) / 255.0)[None, :, :]


# ---------------------------------------------------------------------------
# Netpbm IO
# ---------------------------------------------------------------------------

def _read_header(data: bytes, count: int) -> tuple[list[int], int]:
    """Parse ``count`` integer header fields after the 2-byte magic."""
    pos = 2
    fields: list[int] = []
    n = len(data)
    while len(fields) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed Netpbm header")
        fields.append(int(data[start:pos]))
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or not data[pos : pos + 1].isspace():
        raise FormatError("malformed Netpbm header")
    return fields, pos + 1


def decode_netpbm(data: bytes, allow_color: bool = True) -> GrayImage:
    """Decode P5, or P6 converted to gray by luma when ``allow_color``."""
    magic = data[:2]
    allowed = (b"P5", b"P6") if allow_color else (b"P5",)
    if magic not in allowed:
        raise FormatError(f"unsupported magic {magic!r}; expected {' or '.join(m.decode() for m in allowed)}")
    (width, height, maxval), offset = _read_header(data, 3)
    if width < 1 or height < 1:
        raise FormatError("image dimensions must be positive")
    if maxval != 255:
        raise FormatError(f"maxval {maxval} not supported; expected 255")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    raw = data[offset : offset + need]
    if len(raw) < need:
        raise FormatError(f"truncated raster: {len(raw)} of {need} bytes")
    arr = np.frombuffer(raw, dtype=np.uint8)
    if channels == 1:
        return GrayImage(arr.reshape(height, width))
    rgb = arr.reshape(height, width, 3).astype(np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return GrayImage(quantize(luma))


def encode_pgm(img: GrayImage) -> bytes:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def read_pgm(path: str | os.PathLike) -> GrayImage:
    """Read a binary PGM (P5); anything else is a FormatError."""
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_netpbm(data, allow_color=False)


def read_image(path: str | os.PathLike) -> GrayImage:
    """Read a binary PGM, or a binary PPM (P6) converted to gray by luma."""
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_netpbm(data, allow_color=True)


def write_pgm(img: GrayImage, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img))


def write_ppm(rgb: np.ndarray, path: str | os.PathLike) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Record:
    path: str
    label: ClassLabel


@dataclass
class DatasetManifest:
    records: list[Record]
    classes: tuple[str, ...] = CLASS_NAMES
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.path in seen:
                raise FormatError(f"duplicate manifest path {rec.path!r}")
            seen.add(rec.path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, rec: Record | str) -> Path:
        path = rec.path if isinstance(rec, Record) else rec
        return Path(self.root) / path

    def labels(self) -> np.ndarray:
        return np.array([int(r.label) for r in self.records], dtype=np.int64)

    def counts(self) -> dict[str, int]:
        out = {name: 0 for name in self.classes}
        for rec in self.records:
            out[rec.label.label] += 1
        return out

    def load_images(self) -> list[GrayImage]:
        return [read_pgm(self.resolve(r)) for r in self.records]


def parse_manifest(text: str, root: str | os.PathLike = ".") -> DatasetManifest:
    reader = csv.reader(io.StringIO(text))
    rows = [row for row in reader if row]
    if not rows or [c.strip() for c in rows[0]] != ["path", "label"]:
        raise FormatError("manifest must start with header 'path,label'")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2 or not row[0].strip():
            raise FormatError(f"line {lineno}: expected 'path,label'")
        records.append(Record(row[0].strip(), ClassLabel.parse(row[1])))
    return DatasetManifest(records, root=Path(root))


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Load a ``path,label`` CSV manifest. Paths resolve relative to its directory."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_manifest(text, root=path.parent)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    lines = ["path,label"]
    lines += [f"{r.path},{r.label.label}" for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def make_manifest(pairs: Sequence[tuple[str, ClassLabel | int | str]], root=".") -> DatasetManifest:
    records = []
    for p, lab in pairs:
        if isinstance(lab, str):
            lab = ClassLabel.parse(lab)
        records.append(Record(p, ClassLabel(int(lab))))
    return DatasetManifest(records, root=Path(root))
