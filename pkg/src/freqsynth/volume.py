"""Volumes, the FSV1 file format, and MR/CT intensity normalization."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, FormatError, ShapeError

MAGIC = b"FSV1"
VERSION = 1
HEADER = struct.Struct("<4sI3I3fB7x")
MAX_VOXELS = 1 << 31


class Domain(enum.IntEnum):
    MR_RAW = 0
    MR_NORM = 1
    CT_HU = 2
    CT_NORM = 3
    CT_HIGHFREQ = 4
    CT_LOWFREQ = 5


@dataclass(frozen=True)
class HURange:
    min_hu: float = -1024.0
    max_hu: float = 2252.7

    def __post_init__(self):
        if not self.min_hu < self.max_hu:
            raise ValueError(f"HURange needs min_hu < max_hu, got {self.min_hu}, {self.max_hu}")

    @property
    def width(self):
        return self.max_hu - self.min_hu


@dataclass
class Volume:
    """A (D, H, W) scalar grid. Data is depth-major with W varying fastest."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    domain: Domain = Domain.CT_HU
    clamp_count: int = field(default=0, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"volume data must be a non-empty 3D array, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        # stored as f32 on disk; keep in-memory spacing f32-exact so round trips compare equal
        self.spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ShapeError(f"spacing must be three positive values, got {self.spacing}")
        self.domain = Domain(self.domain)

    @property
    def dims(self):
        return self.data.shape

    def like(self, data, domain=None):
        """New volume sharing spacing (and domain unless overridden)."""
        return Volume(data, self.spacing, self.domain if domain is None else domain)


def write_volume(volume, path):
    d, h, w = volume.dims
    header = HEADER.pack(MAGIC, VERSION, d, h, w, *volume.spacing, int(volume.domain))
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_volume(path):
    raw = Path(path).read_bytes()
    return decode_volume(raw)


def decode_volume(raw):
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)
    if len(raw) < HEADER.size:
        raise FormatError(f"header truncated: {len(raw)} of {HEADER.size} bytes", len(raw))
    _, version, d, h, w, sx, sy, sz, tag = HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if min(d, h, w) < 1:
        raise FormatError(f"zero extent in dims {(d, h, w)}", 8)
    n = d * h * w
    if n >= MAX_VOXELS:
        raise FormatError(f"dims {(d, h, w)} overflow the voxel limit", 8)
    if not min(sx, sy, sz) > 0:
        raise FormatError(f"non-positive spacing {(sx, sy, sz)}", 20)
    if tag > max(Domain):
        raise FormatError(f"unknown domain tag {tag}", 32)
    expected = HEADER.size + 4 * n
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise FormatError(f"payload {kind}: expected {4 * n} bytes for {(d, h, w)}, "
                          f"got {len(raw) - HEADER.size}", min(len(raw), expected))
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=HEADER.size).astype(np.float32)
    return Volume(data.reshape(d, h, w), (sx, sy, sz), Domain(tag))


def normalize_mr(volume):
    """Zero mean, unit population variance."""
    x = volume.data.astype(np.float64)
    std = x.std()
    if std < 1e-6:
        raise DegenerateInputError(f"MR volume is near-constant (std={std:.3g})")
    out = (x - x.mean()) / std
    return volume.like(out.astype(volume.data.dtype), Domain.MR_NORM)


def normalize_ct(volume, hu=HURange()):
    """Affine map of [min_hu, max_hu] onto [0, 1]; out-of-range voxels are clamped and counted."""
    x = volume.data.astype(np.float64)
    outside = int(np.count_nonzero((x < hu.min_hu) | (x > hu.max_hu)))
    out = (np.clip(x, hu.min_hu, hu.max_hu) - hu.min_hu) / hu.width
    result = volume.like(out.astype(volume.data.dtype), Domain.CT_NORM)
    result.clamp_count = outside
    return result


def denormalize_ct(volume, hu=HURange()):
    x = volume.data.astype(np.float64)
    return volume.like((x * hu.width + hu.min_hu).astype(volume.data.dtype), Domain.CT_HU)


def write_pgm(image, path):
    """8-bit binary PGM of a 2D array, min-max windowed."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros(image.shape) if hi <= lo else (image - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    rows, cols = pixels.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise FormatError("not a binary PGM", 0)
    end = 0
    for _ in range(3):
        end = raw.index(b"\n", end) + 1
    _, size, _ = raw[:end].split(b"\n", 2)
    cols, rows = (int(v) for v in size.split())
    return np.frombuffer(raw, dtype=np.uint8, count=rows * cols, offset=end).reshape(rows, cols)


def export_slices(volume, directory, stem, axis=0):
    """Write every slice along ``axis`` as ``<stem>_<index>.pgm``; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(volume.dims[axis]):
        p = directory / f"{stem}_{i:03d}.pgm"
        write_pgm(np.take(volume.data, i, axis=axis), p)
        paths.append(p)
    return paths
