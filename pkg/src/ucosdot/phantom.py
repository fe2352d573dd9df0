"""Random disk phantoms and fixed out-of-distribution targets.

Dataset file layout (little-endian)::

    b"DOTDAT1"                 7-byte magic
    version                    1 byte (currently 1)
    N, channels, H, W          4 x uint32
    values                     N*channels*H*W float64, C order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import Grid

__all__ = [
    "PhantomSpec",
    "generate_phantom",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "ellipse_mask",
    "triangle_mask",
    "disk_mask",
    "ood_phantoms",
    "OOD_SHAPES",
]

DATA_MAGIC = b"DOTDAT1"
DATA_VERSION = 1


@dataclass(frozen=True)
class PhantomSpec:
    """Law of the training phantoms.

    Each channel independently gets a count drawn uniformly from
    ``n_inclusions``, then that many disks with centres uniform over the
    square, radii uniform on ``radius_range`` mm and contrasts uniform on
    ``contrast_range``.  Later disks overwrite earlier ones.
    """

    grid: Grid = field(default_factory=lambda: Grid(32, 50.0))
    n_inclusions: tuple = (1, 2, 3)
    radius_range: tuple = (0.0, 10.0)
    contrast_range: tuple = (0.0, 1.0)
    channels: int = 2
    seed: int = 0

    def __post_init__(self):
        if not self.n_inclusions or min(self.n_inclusions) < 0:
            raise ValueError("inclusion counts must be non-negative")
        lo, hi = self.radius_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad radius range {self.radius_range}")
        lo, hi = self.contrast_range
        if not lo <= hi:
            raise ValueError(f"bad contrast range {self.contrast_range}")
        if self.channels < 1:
            raise ValueError("channels must be positive")


def disk_mask(grid: Grid, center, radius):
    X, Y = grid.centers()
    return (X - center[0]) ** 2 + (Y - center[1]) ** 2 <= radius**2


def ellipse_mask(grid: Grid, center, semi_axes, angle=0.0):
    """Pixels whose centre lies in the ellipse rotated by ``angle`` radians."""
    X, Y = grid.centers()
    dx, dy = X - center[0], Y - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / semi_axes[0]) ** 2 + (v / semi_axes[1]) ** 2 <= 1.0


def triangle_mask(grid: Grid, vertices):
    """Pixels whose centre lies in the closed triangle, for either orientation."""
    X, Y = grid.centers()
    v = np.asarray(vertices, dtype=float)
    signs = []
    for k in range(3):
        (x0, y0), (x1, y1) = v[k], v[(k + 1) % 3]
        signs.append((x1 - x0) * (Y - y0) - (y1 - y0) * (X - x0))
    s = np.stack(signs)
    return np.all(s >= 0, axis=0) | np.all(s <= 0, axis=0)


def generate_phantom(spec: PhantomSpec, rng) -> np.ndarray:
    """One ``(channels, H, W)`` phantom with values in ``[0, 1]``."""
    g = spec.grid
    out = np.zeros((spec.channels,) + g.shape)
    counts = np.asarray(spec.n_inclusions)
    for ch in range(spec.channels):
        for _ in range(int(rng.choice(counts))):
            center = rng.uniform(0.0, g.extent, size=2)
            radius = rng.uniform(*spec.radius_range)
            contrast = rng.uniform(*spec.contrast_range)
            out[ch][disk_mask(g, center, radius)] = contrast
    return out


def generate_dataset(spec: PhantomSpec, n, path=None) -> np.ndarray:
    """``n`` phantoms; phantom ``i`` uses child ``i`` of ``SeedSequence(spec.seed)``."""
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    children = np.random.SeedSequence(spec.seed).spawn(n)
    data = np.stack([generate_phantom(spec, np.random.default_rng(c)) for c in children])
    if path is not None:
        write_dataset(path, data)
    return data


def write_dataset(path, data) -> None:
    data = np.asarray(data, dtype="<f8")
    if data.ndim != 4:
        raise ValueError("dataset must be (N, channels, H, W)")
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(bytes([DATA_VERSION]))
        fh.write(struct.pack("<4I", *data.shape))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_dataset(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:7] != DATA_MAGIC:
        raise ValueError(f"{path}: not a DOTDAT1 dataset")
    if raw[7] != DATA_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {raw[7]}")
    shape = struct.unpack("<4I", raw[8:24])
    body = raw[24:]
    if len(body) != 8 * int(np.prod(shape)):
        raise ValueError(f"{path}: header {shape} does not match {len(body) // 8} stored values")
    return np.frombuffer(body, dtype="<f8").reshape(shape).astype(float)


# Coordinates in millimetres on the 50 mm square; channel 0 is absorption,
# channel 1 scattering.
OOD_SHAPES = {
    "ellipse": [dict(center=(18.0, 30.0), semi_axes=(12.0, 6.0), angle=0.0),
                dict(center=(30.0, 22.0), semi_axes=(12.0, 6.0), angle=np.pi / 2)],
    "triangle": [[(30.0, 8.0), (44.0, 10.0), (36.0, 22.0)],
                 [(8.0, 34.0), (22.0, 40.0), (10.0, 46.0)]],
}
OOD_CONTRAST = 0.5


def ood_phantoms(grid: Grid | None = None) -> dict:
    """Fixed targets: ``"ellipse"``, ``"triangle"`` and ``"ellipse_triangle"``."""
    grid = grid or Grid(32, 50.0)
    out = {name: np.zeros((2,) + grid.shape) for name in ("ellipse", "triangle", "ellipse_triangle")}
    for ch in range(2):
        e = ellipse_mask(grid, **OOD_SHAPES["ellipse"][ch])
        t = triangle_mask(grid, OOD_SHAPES["triangle"][ch])
        out["ellipse"][ch][e] = OOD_CONTRAST
        out["triangle"][ch][t] = OOD_CONTRAST
        out["ellipse_triangle"][ch][e | t] = OOD_CONTRAST
    return out
