"""Procedural before/after scenes with known landslide scars.

Terrain is seeded value noise with a vegetated spectral signature (high
NIR, moderate red). A scar is a rotated rectangle with a one-pixel linear
edge falloff where red and SWIR brighten and NIR darkens. The after image
is also scaled by a global illumination factor, and clouds can blank out
part of it.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lsw import DEFAULT_BANDS
from lsw.catalog import CatalogEntry, serialize_catalog
from lsw.raster import S2_RESOLUTION_M, RasterScene, write_raster
from lsw.seeding import derive_seed

# Vegetated reflectance (L1C digital numbers) per Sentinel-2 band.
BAND_BASE = {2: 500.0, 3: 800.0, 4: 600.0, 8: 3000.0, 12: 1200.0}
SCAR_INTENSITY = {4: 800.0, 8: -1500.0, 12: 1500.0}
CLOUD_VALUE = 9000.0
REVISIT_S = 5 * 86400
EPOCH0 = int(dt.datetime(2016, 1, 1, tzinfo=dt.timezone.utc).timestamp())
PIXEL_M = 10.0


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ScarSpec:
    center: tuple[float, float]  # (x, y) in pixel-corner coordinates
    length_px: float
    width_px: float
    orientation_deg: float = 0.0
    intensity: dict = field(default_factory=lambda: dict(SCAR_INTENSITY))


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    seed: int = 0
    has_landslide: bool = False
    scar: ScarSpec | None = None
    illumination_delta: float = 1.0
    cloud_fraction: float = 0.0
    texture_scale: tuple[int, ...] = (32, 8)
    band_ids: tuple[int, ...] = DEFAULT_BANDS
    before_timestamp: int = EPOCH0
    after_timestamp: int = EPOCH0 + REVISIT_S
    geo_transform: tuple[float, ...] = (0.0, PIXEL_M, 0.0, 0.0, 0.0, -PIXEL_M)

    def validate(self) -> None:
        if self.size < 2 or self.size % 2:
            raise SceneSpecError(f"size must be a positive even number, got {self.size}")
        if not 0.0 <= self.cloud_fraction <= 1.0:
            raise SceneSpecError(f"cloud_fraction {self.cloud_fraction} outside [0, 1]")
        if not 0.7 <= self.illumination_delta <= 1.3:
            raise SceneSpecError(f"illumination_delta {self.illumination_delta} outside [0.7, 1.3]")
        if self.has_landslide:
            if self.scar is None:
                raise SceneSpecError("has_landslide requires a scar")
            if not (scar_weight(self.scar, self.size) > 0).any() or _touches_outside(self.scar, self.size):
                raise SceneSpecError(f"scar {self.scar} does not fit inside a {self.size} px scene")


@dataclass
class GroundTruth:
    label: int
    scar_bbox: tuple[int, int, int, int] | None
    scar_mask: np.ndarray


def value_noise(size: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Bilinearly interpolated random lattice with spacing ``scale`` pixels, values in [0, 1]."""
    n = int(math.ceil(size / scale)) + 2
    lattice = rng.random((n, n))
    t = (np.arange(size) + 0.5) / scale
    i0 = np.floor(t).astype(int)
    f = t - i0
    rows = lattice[i0] * (1 - f)[:, None] + lattice[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _blockify(plane: np.ndarray, factor: int) -> np.ndarray:
    """Mimic a coarser native resolution: block means replicated back to the grid."""
    if factor == 1:
        return plane
    h, w = plane.shape
    blocks = plane.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return np.repeat(np.repeat(blocks, factor, axis=0), factor, axis=1)


def _native_factors(band_ids) -> list[int]:
    grid = min(S2_RESOLUTION_M.get(b, 10) for b in band_ids)
    return [S2_RESOLUTION_M.get(b, 10) // grid for b in band_ids]


def terrain(spec: SceneSpec) -> np.ndarray:
    """Pre-event reflectance planes [bands, size, size] (float64)."""
    rng = np.random.default_rng(spec.seed)
    weights = (0.7, 0.3) if len(spec.texture_scale) == 2 else (1.0 / len(spec.texture_scale),) * len(spec.texture_scale)
    veg = sum(w * value_noise(spec.size, s, rng) for w, s in zip(weights, spec.texture_scale))
    planes = []
    for b, factor in zip(spec.band_ids, _native_factors(spec.band_ids)):
        own = value_noise(spec.size, spec.texture_scale[-1], rng)
        plane = BAND_BASE.get(b, 1000.0) * (0.75 + 0.5 * (0.8 * veg + 0.2 * own))
        planes.append(_blockify(plane, factor))
    return np.stack(planes)


def scar_weight(scar: ScarSpec, size: int) -> np.ndarray:
    """Soft scar coverage in [0, 1] sampled at pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    theta = math.radians(scar.orientation_deg)
    dx, dy = xx - scar.center[0], yy - scar.center[1]
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    inside = np.minimum(scar.length_px / 2 - np.abs(u), scar.width_px / 2 - np.abs(v))
    return np.clip(inside + 1.0, 0.0, 1.0)


def _touches_outside(scar: ScarSpec, size: int) -> bool:
    # the falloff reaches one pixel beyond the rectangle; probe on a padded grid
    pad = int(math.ceil(max(scar.length_px, scar.width_px))) + 2
    big = ScarSpec((scar.center[0] + pad, scar.center[1] + pad), scar.length_px, scar.width_px, scar.orientation_deg)
    m = scar_weight(big, size + 2 * pad) > 0
    inner = m[pad : pad + size, pad : pad + size]
    return int(inner.sum()) != int(m.sum())


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return int(cols.min()), int(rows.min()), int(cols.max() - cols.min() + 1), int(rows.max() - rows.min() + 1)


def _cloud_mask(size: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if fraction <= 0:
        return np.zeros((size, size), dtype=bool)
    if fraction >= 1:
        return np.ones((size, size), dtype=bool)
    field_ = value_noise(size, 16, rng)
    k = int(round(fraction * size * size))
    order = np.argsort(field_, axis=None, kind="stable")[::-1][:k]
    mask = np.zeros(size * size, dtype=bool)
    mask[order] = True
    return mask.reshape(size, size)


def _render(spec: SceneSpec, base: np.ndarray, illumination: float, weight, cloud: np.ndarray, timestamp: int) -> RasterScene:
    planes = base * illumination
    if weight is not None:
        for i, (b, factor) in enumerate(zip(spec.band_ids, _native_factors(spec.band_ids))):
            delta = spec.scar.intensity.get(b, 0.0)
            if delta:
                planes[i] = _blockify(planes[i] + weight * delta, factor)
    planes = np.clip(planes, 0.0, None)
    mask = None
    if cloud.any():
        for i, factor in enumerate(_native_factors(spec.band_ids)):
            # a coarse pixel is cloudy when any grid pixel inside it is
            covered = _blockify(cloud.astype(np.float64), factor) > 0
            planes[i][covered] = CLOUD_VALUE
        mask = cloud.astype(np.float32)
    elif spec.cloud_fraction > 0:
        mask = np.zeros(cloud.shape, dtype=np.float32)
    return RasterScene(planes.astype(np.float32), spec.band_ids, timestamp, spec.geo_transform, cloud_mask=mask)


def generate_scene_pair(spec: SceneSpec) -> tuple[RasterScene, RasterScene, GroundTruth]:
    spec.validate()
    base = terrain(spec)
    weight = scar_weight(spec.scar, spec.size) if spec.has_landslide else None
    cloud = _cloud_mask(spec.size, spec.cloud_fraction, np.random.default_rng(derive_seed(spec.seed, 1)))
    before = _render(spec, base, 1.0, None, np.zeros_like(cloud), spec.before_timestamp)
    after = _render(spec, base, spec.illumination_delta, weight, cloud, spec.after_timestamp)
    mask = weight > 0 if weight is not None else np.zeros((spec.size, spec.size), dtype=bool)
    truth = GroundTruth(int(spec.has_landslide), tight_bbox(mask), mask)
    return before, after, truth


def change_index(pair) -> np.ndarray:
    """Per-pixel SWIR-vs-NIR log-ratio change; global illumination cancels."""
    b12, b8 = pair.band_ids.index(12), pair.band_ids.index(8)
    eps = 1e-6
    r12 = np.log((pair.after[b12] + eps) / (pair.before[b12] + eps))
    r8 = np.log((pair.after[b8] + eps) / (pair.before[b8] + eps))
    return r12 - r8


def heuristic_classify(pair, threshold: float = 0.2, window: int = 3) -> int:
    """Label 1 when some window-averaged change index exceeds ``threshold``."""
    from numpy.lib.stride_tricks import sliding_window_view

    c = change_index(pair)
    score = sliding_window_view(c, (window, window)).mean(axis=(-2, -1)).max()
    return int(score > threshold)


# ---------------------------------------------------------------- datasets


def _site_scar(size: int, rng: np.random.Generator) -> ScarSpec:
    length = float(rng.uniform(12, 24))
    width = float(rng.uniform(4, 8))
    margin = length / 2 + 4
    center = (float(rng.uniform(margin, size - margin)), float(rng.uniform(margin, size - margin)))
    jitter = rng.uniform(0.8, 1.2, size=len(SCAR_INTENSITY))
    intensity = {b: float(d * j) for (b, d), j in zip(SCAR_INTENSITY.items(), jitter)}
    return ScarSpec(center, length, width, float(rng.uniform(0, 180)), intensity)


def _geo_transform(rng: np.random.Generator) -> tuple[float, ...]:
    lat = round(float(rng.uniform(-50, 60)), 4)
    lon = round(float(rng.uniform(-170, 170)), 4)
    dlat = PIXEL_M / 111320.0
    dlon = dlat / math.cos(math.radians(lat))
    return (lon, dlon, 0.0, lat, 0.0, -dlat)


def generate_dataset(
    n_positive: int,
    n_negative: int,
    size: int,
    master_seed: int,
    out_dir,
    n_pre: int = 2,
    cloud_fraction: float = 0.0,
    illumination_range: tuple[float, float] = (0.85, 1.15),
) -> Path:
    """Write scenes, a catalog and a truth sidecar under ``out_dir``.

    Layout: ``catalog.csv``, ``truth.csv``, ``scenes/<site_id>/t<k>.lsrs``.
    Positive sites get ``n_pre`` pre-event scenes plus one post-event scene
    and a catalog row; negative sites get ``n_pre + 1`` pre-event scenes and
    no catalog row.
    """
    if n_positive < 0 or n_negative < 0:
        raise ValueError("site counts must be non-negative")
    if n_pre < 2:
        raise ValueError("need at least 2 pre-event scenes per site")
    out = Path(out_dir)
    scene_root = out / "scenes"
    try:
        scene_root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {scene_root}: {exc}") from exc

    entries: list[CatalogEntry] = []
    truth_rows = ["site_id;label;bbox_x;bbox_y;bbox_w;bbox_h"]
    for idx in range(n_positive + n_negative):
        positive = idx < n_positive
        site_id = f"site_{idx:03d}"
        rng = np.random.default_rng(derive_seed(master_seed, idx))
        geo = _geo_transform(rng)
        scar = _site_scar(size, rng) if positive else None
        t0 = EPOCH0 + int(rng.integers(0, 400)) * 86400
        spec = SceneSpec(
            size=size,
            seed=derive_seed(master_seed, idx, 1),
            has_landslide=positive,
            scar=scar,
            cloud_fraction=cloud_fraction,
            geo_transform=geo,
        )
        spec.validate()
        base = terrain(spec)
        n_scenes = n_pre + 1
        illum = rng.uniform(*illumination_range, size=n_scenes)
        site_dir = scene_root / site_id
        site_dir.mkdir(exist_ok=True)
        weight = scar_weight(scar, size) if positive else None
        for k in range(n_scenes):
            post = positive and k == n_scenes - 1
            cloud = _cloud_mask(size, cloud_fraction, np.random.default_rng(derive_seed(master_seed, idx, 2, k)))
            scene = _render(spec, base, float(illum[k]), weight if post else None, cloud, t0 + k * REVISIT_S)
            path = site_dir / f"t{k}.lsrs"
            try:
                write_raster(scene, path)
            except OSError as exc:
                raise OSError(f"cannot write {path}: {exc}") from exc

        if positive:
            bbox = tight_bbox(weight > 0)
            cx, cy = scar.center
            need = max(cx - bbox[0], bbox[0] + bbox[2] - cx, cy - bbox[1], bbox[1] + bbox[3] - cy) + 1.0
            accuracy_km = math.ceil(need) * PIXEL_M / 1000.0
            lon = geo[0] + cx * geo[1]
            lat = geo[3] + cy * geo[5]
            event_day = dt.datetime.fromtimestamp(t0 + (n_pre - 1) * REVISIT_S + 2 * 86400, dt.timezone.utc).date()
            entries.append(
                CatalogEntry(
                    site_id, event_day, "very_large", "landslide", lat, lon, accuracy_km,
                    round(float(rng.uniform(20, 300)), 1), round(float(rng.uniform(40, 100)), 1), round(float(rng.uniform(0, 30)), 1),
                )
            )
            truth_rows.append(f"{site_id};1;{bbox[0]};{bbox[1]};{bbox[2]};{bbox[3]}")
        else:
            truth_rows.append(f"{site_id};0;;;;")

    (out / "catalog.csv").write_text(serialize_catalog(entries))
    (out / "truth.csv").write_text("\n".join(truth_rows) + "\n")
    return out


def read_truth(path) -> dict[str, tuple[int, tuple[int, int, int, int] | None]]:
    rows = {}
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        site, label, *box = line.split(";")
        rows[site] = (int(label), tuple(int(v) for v in box) if all(box) else None)
    return rows
