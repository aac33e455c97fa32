"""Deterministic paired MR/CT phantoms.

A latent "anatomy" field is a sum of Gaussian blobs. MR is a saturating
remap of the field plus noise; CT is a different remap plus thin high-HU
shells wherever the field's gradient magnitude peaks, so CT carries real
high-frequency content aligned with structure.

Randomness comes from a counter-based splitmix64 stream: value ``i`` of
stream ``s`` under seed ``k`` is ``mix(mix(k) + mix(s) + (i + 1) * GAMMA)``,
so output is portable and needs no platform RNG state.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .volume import Domain, HURange, Volume, read_volume, write_volume

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(x):
    """splitmix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64).copy()
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= _M1
        z ^= z >> np.uint64(27)
        z *= _M2
        z ^= z >> np.uint64(31)
    return z


class CounterRNG:
    """Stateless random streams addressed by (seed, stream id, counter)."""

    def __init__(self, seed):
        self.key = mix64(np.array([int(seed) & _MASK], dtype=np.uint64))[0]

    def bits(self, stream, n):
        sid = mix64(np.array([int(stream) & _MASK], dtype=np.uint64))[0]
        counters = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            return mix64(self.key + sid + counters * GAMMA)

    def uniform(self, stream, n, low=0.0, high=1.0):
        u = (self.bits(stream, n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def normal(self, stream, n):
        """Box-Muller over two halves of a 2n-long uniform stream."""
        u = self.uniform(stream, 2 * n)
        u1 = 1.0 - u[:n]  # (0, 1]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[n:])


@dataclass
class GeneratorSpec:
    dims: tuple = (24, 24, 24)
    seed: int = 0
    n_blobs: int = 6
    shell_contrast: float = 1200.0
    noise_sigma: float = 0.02
    spacing: tuple = (1.0, 1.0, 1.0)


# stream ids
_BLOBS, _NOISE = 1, 2

MR_SCALE = 400.0
CT_AIR = -1000.0
CT_TISSUE_SPAN = 1100.0


def latent_field(spec):
    d, h, w = spec.dims
    rng = CounterRNG(spec.seed)
    u = rng.uniform(_BLOBS, 6 * spec.n_blobs).reshape(spec.n_blobs, 6) if spec.n_blobs else None
    grid = np.meshgrid(*[(np.arange(n) + 0.5) / n for n in (d, h, w)], indexing="ij")
    field = np.zeros((d, h, w))
    for i in range(spec.n_blobs):
        center = 0.2 + 0.6 * u[i, :3]
        radius = 0.10 + 0.15 * u[i, 3]
        amplitude = 0.5 + 0.5 * u[i, 4]
        r2 = sum((g - c) ** 2 for g, c in zip(grid, center))
        field += amplitude * np.exp(-r2 / (2 * radius**2))
    return field / field.max() if spec.n_blobs else field


def shell_map(field):
    """Soft ridge mask where the field's gradient magnitude is near its maximum."""
    grad = np.sqrt(sum(g**2 for g in np.gradient(field)))
    peak = grad.max()
    if peak == 0:
        return np.zeros_like(field)
    return np.clip((grad / peak - 0.55) / 0.2, 0.0, 1.0)


def generate_pair(spec=GeneratorSpec()):
    """(MR_RAW volume, CT_HU volume) for one phantom."""
    if len(spec.dims) != 3 or min(spec.dims) < 8:
        raise ArgumentError(f"dims must be three extents >= 8, got {spec.dims}")
    field = latent_field(spec)
    n = int(np.prod(spec.dims))
    noise = CounterRNG(spec.seed).normal(_NOISE, n).reshape(spec.dims)
    mr = MR_SCALE * (1.0 - np.exp(-3.0 * field)) + spec.noise_sigma * MR_SCALE * noise
    ct = CT_AIR + CT_TISSUE_SPAN * field**1.5 + spec.shell_contrast * shell_map(field)
    hu = HURange()
    ct = np.clip(ct, hu.min_hu, hu.max_hu)
    return (Volume(mr.astype(np.float32), spec.spacing, Domain.MR_RAW),
            Volume(ct.astype(np.float32), spec.spacing, Domain.CT_HU))


@dataclass
class ManifestEntry:
    index: int
    mr_path: str
    ct_path: str
    seed: int


def generate_dataset(spec, n_pairs, out_dir):
    """Write ``n_pairs`` FSV1 pairs (seeds seed+i) and a manifest; returns the entries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_pairs):
        seed = spec.seed + i
        mr, ct = generate_pair(GeneratorSpec(spec.dims, seed, spec.n_blobs, spec.shell_contrast,
                                             spec.noise_sigma, spec.spacing))
        mr_name, ct_name = f"pair{i:03d}_mr.fsv", f"pair{i:03d}_ct.fsv"
        try:
            write_volume(mr, out / mr_name)
            write_volume(ct, out / ct_name)
        except OSError as exc:
            raise OSError(f"failed writing pair {i} into {out}: {exc}") from exc
        entries.append(ManifestEntry(i, mr_name, ct_name, seed))
    write_manifest(entries, out / "manifest.txt")
    return entries


def write_manifest(entries, path):
    Path(path).write_text("".join(f"{e.index}, {e.mr_path}, {e.ct_path}, {e.seed}\n"
                                  for e in entries))


def read_manifest(path):
    """Manifest entries with paths resolved relative to the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'index, mr_path, ct_path, seed'")
        entries.append(ManifestEntry(int(parts[0]), str(path.parent / parts[1]),
                                     str(path.parent / parts[2]), int(parts[3])))
    return entries


def load_pairs(manifest_path):
    return [(read_volume(e.mr_path), read_volume(e.ct_path))
            for e in read_manifest(manifest_path)]
