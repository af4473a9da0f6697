"""Turn a catalog plus a scene directory into per-site tile pairs, and store them.

Scene directory layout: ``<scenes>/<site_id>/*.lsrs``. A site whose id
matches a catalog entry (slug of the location name) yields positive pairs
(last pre-event scene vs first post-event scene) and negative pairs from its
pre-event scenes. Sites without a catalog entry yield negatives only.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from lsw import DEFAULT_BANDS
from lsw.catalog import CatalogEntry
from lsw.pairs import CloudCoverError, PairError, TilePair, build_negative_pairs, sample_window, validate_pair
from lsw.raster import RasterScene, load_raster
from lsw.seeding import derive_seed

log = logging.getLogger("lsw")

DEFAULT_ACCURACY_KM = 1.0


@dataclass
class Site:
    site_id: str
    pairs: list[TilePair]

    @property
    def labels(self) -> set[int]:
        return {p.label for p in self.pairs}


def landslide_bbox(entry: CatalogEntry, scene: RasterScene) -> tuple[int, int, int, int]:
    """Square of side 2 * accuracy / resolution around the event point, clamped to the scene."""
    acc = entry.location_accuracy_km if entry.location_accuracy_km is not None else DEFAULT_ACCURACY_KM
    half = acc * 1000.0 / scene.resolution_m
    col, row = scene.pixel_of(entry.longitude, entry.latitude)
    x0 = max(0, math.floor(col - half + 1e-9))
    y0 = max(0, math.floor(row - half + 1e-9))
    x1 = min(scene.width, math.ceil(col + half - 1e-9))
    y1 = min(scene.height, math.ceil(row + half - 1e-9))
    if x1 <= x0 or y1 <= y0:
        raise PairError(f"{entry.location_name}: event point lies outside the scene")
    return x0, y0, x1 - x0, y1 - y0


def load_scene_dir(root) -> dict[str, list[RasterScene]]:
    """All scenes per site directory, sorted by timestamp."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"scene directory {root} does not exist")
    sites = {}
    for site_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        scenes = [load_raster(f) for f in sorted(site_dir.glob("*.lsrs"))]
        if scenes:
            sites[site_dir.name] = sorted(scenes, key=lambda s: s.timestamp)
    return sites


def _day_bounds(day: dt.date) -> tuple[int, int]:
    start = int(dt.datetime(day.year, day.month, day.day, tzinfo=dt.timezone.utc).timestamp())
    return start, start + 86400


def _positive_pairs(entry, pre, post, tile, count, rng, bands, site_id, attempts=50):
    before, after = pre[-1], post[0]
    bbox = landslide_bbox(entry, before)
    out = []
    for _ in range(count):
        for _attempt in range(attempts):
            try:
                out.append(sample_window(before, after, bbox, tile, rng, bands, site_id))
                break
            except CloudCoverError:
                continue
        else:
            raise CloudCoverError(f"{site_id}: no cloud-free window around the landslide")
    return out


def prepare_sites(
    entries: Sequence[CatalogEntry],
    scenes: dict[str, list[RasterScene]],
    tile: int,
    tiles_per_site: int,
    seed: int,
    bands: Sequence[int] = DEFAULT_BANDS,
) -> list[Site]:
    """Build ``tiles_per_site`` positives and negatives per catalogued site,
    and ``tiles_per_site`` negatives per uncatalogued site."""
    by_id = {e.site_id: e for e in entries}
    sites = []
    for idx, site_id in enumerate(sorted(scenes)):
        rng = np.random.default_rng(derive_seed(seed, idx))
        site_scenes = scenes[site_id]
        entry = by_id.get(site_id)
        pairs: list[TilePair] = []
        if entry is None:
            pairs += build_negative_pairs(site_scenes, tile, tiles_per_site, rng, bands, site_id)
        else:
            start, end = _day_bounds(entry.event_date)
            pre = [s for s in site_scenes if s.timestamp < start]
            post = [s for s in site_scenes if s.timestamp >= end]
            if not pre or not post:
                log.warning("%s: need scenes before and after %s, skipping", site_id, entry.event_date)
                continue
            pairs += _positive_pairs(entry, pre, post, tile, tiles_per_site, rng, bands, site_id)
            if len(pre) >= 2:
                pairs += build_negative_pairs(pre, tile, tiles_per_site, rng, bands, site_id)
        for p in pairs:
            validate_pair(p)
        sites.append(Site(site_id, pairs))
    missing = sorted(set(by_id) - set(scenes))
    if missing:
        log.warning("catalog sites without scenes: %s", ", ".join(missing))
    return sites


# ---------------------------------------------------------------- storage


def save_sites(sites: Sequence[Site], out_dir) -> None:
    """One ``<site_id>.npz`` per site."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for site in sites:
        ps = site.pairs
        np.savez(
            out / f"{site.site_id}.npz",
            before=np.stack([p.before for p in ps]).astype(np.float32),
            after=np.stack([p.after for p in ps]).astype(np.float32),
            label=np.array([p.label for p in ps], dtype=np.int8),
            bbox=np.array([p.bbox if p.bbox is not None else (-1, -1, -1, -1) for p in ps], dtype=np.int32),
            before_timestamp=np.array([p.before_timestamp for p in ps], dtype=np.int64),
            after_timestamp=np.array([p.after_timestamp for p in ps], dtype=np.int64),
            band_ids=np.array(ps[0].band_ids, dtype=np.int32),
        )


def load_sites(data_dir) -> list[Site]:
    data_dir = Path(data_dir)
    files = sorted(data_dir.glob("*.npz"))
    if not files:
        raise FileNotFoundError(f"no prepared sites (*.npz) in {data_dir}")
    sites = []
    for f in files:
        with np.load(f) as z:
            bands = tuple(int(b) for b in z["band_ids"])
            pairs = [
                TilePair(
                    z["before"][i],
                    z["after"][i],
                    int(z["label"][i]),
                    None if z["bbox"][i][0] < 0 else tuple(int(v) for v in z["bbox"][i]),
                    f.stem,
                    int(z["before_timestamp"][i]),
                    int(z["after_timestamp"][i]),
                    bands,
                )
                for i in range(len(z["label"]))
            ]
        sites.append(Site(f.stem, pairs))
    return sites
