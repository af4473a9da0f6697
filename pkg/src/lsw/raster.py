"""LSRS multi-band raster files, band selection and radiometric scaling.

File layout (little-endian)::

    "LSRS" | version u16 = 1 | width u32 | height u32 | band_count u8
    band_id u8 * band_count | native_resolution_m u16 * band_count
    timestamp i64 | geo_transform f64 * 6 | has_cloud_mask u8
    planes f32, row-major, one per band at its native resolution
    cloud mask plane f32 {0,1} at grid resolution (if has_cloud_mask)

Bands coarser than the grid (Sentinel-2 band 12 is 20 m against a 10 m
grid) are stored at native size and upsampled by nearest neighbour on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"LSRS"
VERSION = 1
REFLECTANCE_CEILING = 10000.0

# Sentinel-2 native ground sampling distance per band number.
S2_RESOLUTION_M = {1: 60, 2: 10, 3: 10, 4: 10, 5: 20, 6: 20, 7: 20, 8: 10, 9: 60, 10: 60, 11: 20, 12: 20}

_HEAD = struct.Struct("<4sHIIB")
_TAIL = struct.Struct("<q6dB")


class RasterFormatError(ValueError):
    pass


class BandError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass
class RasterScene:
    """One timestamped acquisition; every plane lives on the common grid."""

    planes: np.ndarray  # [bands, height, width] float32
    band_ids: tuple[int, ...]
    timestamp: int
    geo_transform: tuple[float, ...] = (0.0, 10.0, 0.0, 0.0, 0.0, -10.0)
    native_resolution_m: tuple[int, ...] | None = None
    cloud_mask: np.ndarray | None = None
    resolution_m: int = field(init=False)

    def __post_init__(self):
        self.planes = np.ascontiguousarray(self.planes, dtype=np.float32)
        self.band_ids = tuple(int(b) for b in self.band_ids)
        if self.planes.ndim != 3 or self.planes.shape[0] != len(self.band_ids):
            raise ValueError(f"planes shape {self.planes.shape} does not match {len(self.band_ids)} band ids")
        if self.native_resolution_m is None:
            self.native_resolution_m = tuple(S2_RESOLUTION_M.get(b, 10) for b in self.band_ids)
        self.native_resolution_m = tuple(int(r) for r in self.native_resolution_m)
        self.resolution_m = min(self.native_resolution_m)
        self.geo_transform = tuple(float(g) for g in self.geo_transform)
        if self.cloud_mask is not None:
            self.cloud_mask = np.ascontiguousarray(self.cloud_mask, dtype=np.float32)
            if self.cloud_mask.shape != self.planes.shape[1:]:
                raise ValueError("cloud mask must match the grid")

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def band(self, band_id: int) -> np.ndarray:
        return self.planes[self.band_ids.index(band_id)]

    def pixel_of(self, lon: float, lat: float) -> tuple[float, float]:
        """Inverse of the affine geo transform: (column, row) for a coordinate."""
        g = self.geo_transform
        a = np.array([[g[1], g[2]], [g[4], g[5]]])
        col, row = np.linalg.solve(a, [lon - g[0], lat - g[3]])
        return float(col), float(row)

    def coordinate_of(self, col: float, row: float) -> tuple[float, float]:
        g = self.geo_transform
        return g[0] + col * g[1] + row * g[2], g[3] + col * g[4] + row * g[5]


def _block(res: int, grid: int) -> int:
    if res % grid:
        raise RasterFormatError(f"native resolution {res} m is not a multiple of the {grid} m grid")
    return res // grid


def write_raster(scene: RasterScene, path) -> None:
    grid = scene.resolution_m
    chunks = [
        _HEAD.pack(MAGIC, VERSION, scene.width, scene.height, len(scene.band_ids)),
        struct.pack(f"<{len(scene.band_ids)}B", *scene.band_ids),
        struct.pack(f"<{len(scene.band_ids)}H", *scene.native_resolution_m),
        _TAIL.pack(int(scene.timestamp), *scene.geo_transform, int(scene.cloud_mask is not None)),
    ]
    for plane, res in zip(scene.planes, scene.native_resolution_m):
        f = _block(res, grid)
        if scene.height % f or scene.width % f:
            raise RasterFormatError(f"grid {scene.width}x{scene.height} not divisible into {res} m blocks")
        chunks.append(plane[::f, ::f].astype("<f4").tobytes())
    if scene.cloud_mask is not None:
        chunks.append(scene.cloud_mask.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_raster(path) -> RasterScene:
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size:
        raise RasterFormatError(f"{path}: file too short for header")
    magic, version, width, height, nb = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise RasterFormatError(f"{path}: unsupported version {version}")
    off = _HEAD.size
    head_len = off + 3 * nb + _TAIL.size
    if len(buf) < head_len:
        raise RasterFormatError(f"{path}: truncated header")
    band_ids = struct.unpack_from(f"<{nb}B", buf, off)
    off += nb
    native = struct.unpack_from(f"<{nb}H", buf, off)
    off += 2 * nb
    timestamp, *geo, has_mask = _TAIL.unpack_from(buf, off)
    off += _TAIL.size
    if not native:
        raise RasterFormatError(f"{path}: no bands")
    grid = min(native)
    sizes = []
    for res in native:
        f = _block(res, grid)
        sizes.append((height // f, width // f, f))
    expected = off + 4 * (sum(h * w for h, w, _ in sizes) + (height * width if has_mask else 0))
    if len(buf) != expected:
        kind = "truncated payload" if len(buf) < expected else "trailing bytes"
        raise RasterFormatError(f"{path}: {kind}: expected {expected} bytes, got {len(buf)}")

    planes = np.empty((nb, height, width), dtype=np.float32)
    for i, (h, w, f) in enumerate(sizes):
        plane = np.frombuffer(buf, dtype="<f4", count=h * w, offset=off).reshape(h, w)
        off += 4 * h * w
        planes[i] = upsample_nearest(plane, f, (height, width))
    mask = None
    if has_mask:
        mask = np.frombuffer(buf, dtype="<f4", count=height * width, offset=off).reshape(height, width).copy()
    return RasterScene(planes, band_ids, timestamp, tuple(geo), native, mask)


def upsample_nearest(plane: np.ndarray, factor: int, shape) -> np.ndarray:
    """Replicate each sample into a factor x factor block."""
    if factor == 1:
        return plane
    return np.repeat(np.repeat(plane, factor, axis=0), factor, axis=1)[: shape[0], : shape[1]]


def select_bands(scene: RasterScene, wanted: Sequence[int]) -> np.ndarray:
    """Band stack [len(wanted), H, W] in exactly the requested order."""
    missing = [b for b in wanted if b not in scene.band_ids]
    if missing:
        raise BandError(f"band {missing[0]} not in scene (has {list(scene.band_ids)})")
    return np.stack([scene.band(b) for b in wanted])


def normalize(stack: np.ndarray, ceiling: float = REFLECTANCE_CEILING) -> np.ndarray:
    """Scale reflectance into [0, 1] by a fixed ceiling, clamping outliers."""
    return np.clip(np.asarray(stack, dtype=np.float32) / np.float32(ceiling), 0.0, 1.0)
