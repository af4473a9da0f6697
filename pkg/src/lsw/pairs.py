"""Labelled (before, after) tile pairs and the operations that make them."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from lsw import DEFAULT_BANDS
from lsw.raster import RasterScene, normalize, select_bands

MAX_CLOUD_FRACTION = 0.3


class PairError(ValueError):
    pass


class CloudCoverError(PairError):
    pass


@dataclass(frozen=True, eq=False)
class TilePair:
    """A training example. Band stacks are normalised, shape [bands, T, T].

    ``bbox`` is (x, y, w, h) in tile pixels, x along columns.
    """

    before: np.ndarray
    after: np.ndarray
    label: int
    bbox: tuple[int, int, int, int] | None = None
    source_site: str = ""
    before_timestamp: int = 0
    after_timestamp: int = 1
    band_ids: tuple[int, ...] = DEFAULT_BANDS

    @property
    def tile_size(self) -> int:
        return self.before.shape[-1]


def validate_pair(pair: TilePair) -> None:
    """Raise :class:`PairError` unless every TilePair invariant holds."""
    if pair.before_timestamp >= pair.after_timestamp:
        raise PairError(f"{pair.source_site}: before timestamp {pair.before_timestamp} not earlier than {pair.after_timestamp}")
    if pair.before.shape != pair.after.shape:
        raise PairError(f"{pair.source_site}: member shapes differ {pair.before.shape} vs {pair.after.shape}")
    if pair.before.ndim != 3 or pair.before.shape[0] != len(pair.band_ids):
        raise PairError(f"{pair.source_site}: band stack shape {pair.before.shape} vs bands {pair.band_ids}")
    if pair.label not in (0, 1):
        raise PairError(f"{pair.source_site}: label {pair.label} not in {{0, 1}}")
    if pair.label == 1:
        if pair.bbox is None:
            raise PairError(f"{pair.source_site}: positive pair without bbox")
        x, y, w, h = pair.bbox
        th, tw = pair.before.shape[1:]
        if w < 1 or h < 1 or x < 0 or y < 0 or x + w > tw or y + h > th:
            raise PairError(f"{pair.source_site}: bbox {pair.bbox} outside tile {tw}x{th}")
    elif pair.bbox is not None:
        raise PairError(f"{pair.source_site}: negative pair carries a bbox")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _check_congruent(a: RasterScene, b: RasterScene) -> None:
    if a.planes.shape != b.planes.shape or a.band_ids != b.band_ids:
        raise PairError(
            f"scenes not congruent: {a.band_ids}/{a.planes.shape} vs {b.band_ids}/{b.planes.shape}"
        )


def _cloud_fraction(scene: RasterScene, ox: int, oy: int, tile: int) -> float:
    if scene.cloud_mask is None:
        return 0.0
    return float(scene.cloud_mask[oy : oy + tile, ox : ox + tile].mean())


def _crop(scene: RasterScene, bands, ox, oy, tile) -> np.ndarray:
    window = RasterScene(scene.planes[:, oy : oy + tile, ox : ox + tile], scene.band_ids, scene.timestamp)
    return np.ascontiguousarray(normalize(select_bands(window, bands)))


def _reject_clouds(scenes, ox, oy, tile, max_cloud):
    for s in scenes:
        frac = _cloud_fraction(s, ox, oy, tile)
        if frac > max_cloud:
            raise CloudCoverError(f"window at ({ox}, {oy}) is {frac:.0%} cloud (limit {max_cloud:.0%})")


def sample_window(
    before: RasterScene,
    after: RasterScene,
    bbox: Sequence[int],
    tile: int,
    rng_seed,
    bands: Sequence[int] = DEFAULT_BANDS,
    site: str = "",
    max_cloud: float = MAX_CLOUD_FRACTION,
) -> TilePair:
    """Random tile-sized window guaranteed to contain ``bbox`` (scene pixels).

    The offset is uniform over every position whose window fully contains the
    box; the same offset crops both scenes.
    """
    _check_congruent(before, after)
    x, y, w, h = (int(v) for v in bbox)
    if w > tile or h > tile:
        raise PairError(f"bbox {w}x{h} larger than tile {tile}")
    if tile > before.width or tile > before.height:
        raise PairError(f"tile {tile} larger than scene {before.width}x{before.height}")
    x_lo, x_hi = max(0, x + w - tile), min(x, before.width - tile)
    y_lo, y_hi = max(0, y + h - tile), min(y, before.height - tile)
    if x_lo > x_hi or y_lo > y_hi:
        raise PairError(f"bbox {tuple(bbox)} cannot be covered by a {tile} tile inside the scene")
    rng = _rng(rng_seed)
    ox = int(rng.integers(x_lo, x_hi + 1))
    oy = int(rng.integers(y_lo, y_hi + 1))
    _reject_clouds((before, after), ox, oy, tile, max_cloud)
    return TilePair(
        _crop(before, bands, ox, oy, tile),
        _crop(after, bands, ox, oy, tile),
        1,
        (x - ox, y - oy, w, h),
        site,
        int(before.timestamp),
        int(after.timestamp),
        tuple(bands),
    )


def build_negative_pairs(
    scenes: Sequence[RasterScene],
    tile: int,
    count: int,
    rng_seed,
    bands: Sequence[int] = DEFAULT_BANDS,
    site: str = "",
    max_cloud: float = MAX_CLOUD_FRACTION,
    max_attempts: int = 50,
) -> list[TilePair]:
    """``count`` label-0 pairs from two distinct pre-event scenes each.

    Scenes are sorted by timestamp; the scene pairing and the window are
    drawn uniformly. Cloudy draws are retried up to ``max_attempts`` times.
    """
    if len(scenes) < 2:
        raise PairError(f"need at least 2 pre-event scenes, got {len(scenes)}")
    ordered = sorted(scenes, key=lambda s: s.timestamp)
    stamps = [s.timestamp for s in ordered]
    if len(set(stamps)) != len(stamps):
        raise PairError(f"duplicate scene timestamps {stamps}")
    for s in ordered[1:]:
        _check_congruent(ordered[0], s)
    ref = ordered[0]
    if tile > ref.width or tile > ref.height:
        raise PairError(f"tile {tile} larger than scene {ref.width}x{ref.height}")
    combos = list(itertools.combinations(range(len(ordered)), 2))
    rng = _rng(rng_seed)
    out = []
    for _ in range(count):
        for _attempt in range(max_attempts):
            i, j = combos[int(rng.integers(len(combos)))]
            ox = int(rng.integers(0, ref.width - tile + 1))
            oy = int(rng.integers(0, ref.height - tile + 1))
            try:
                _reject_clouds((ordered[i], ordered[j]), ox, oy, tile, max_cloud)
            except CloudCoverError:
                continue
            break
        else:
            raise CloudCoverError(f"{site}: no cloud-free window in {max_attempts} draws")
        out.append(
            TilePair(
                _crop(ordered[i], bands, ox, oy, tile),
                _crop(ordered[j], bands, ox, oy, tile),
                0,
                None,
                site,
                int(ordered[i].timestamp),
                int(ordered[j].timestamp),
                tuple(bands),
            )
        )
    return out


# ---------------------------------------------------------------- dihedral group


class DihedralTransform:
    """One of the 8 symmetries of the square: ``id = rotations + 4 * flip``.

    A rotation maps out[i, j] = in[W-1-j, i] (a quarter turn counter-clockwise
    when rows index an upward y axis); the optional horizontal flip is
    applied after the rotations.
    """

    __slots__ = ("id",)

    def __init__(self, id: int):  # noqa: A002
        if not 0 <= int(id) < 8:
            raise ValueError(f"dihedral id must be in 0..7, got {id}")
        self.id = int(id)

    @property
    def rotations(self) -> int:
        return self.id % 4

    @property
    def flip(self) -> bool:
        return self.id >= 4

    def apply(self, a: np.ndarray) -> np.ndarray:
        """Transform the last two axes of ``a``."""
        if a.shape[-1] != a.shape[-2]:
            raise ValueError(f"dihedral transforms need square tiles, got {a.shape[-2]}x{a.shape[-1]}")
        out = np.rot90(a, k=-self.rotations, axes=(-2, -1))
        if self.flip:
            out = out[..., ::-1]
        return np.ascontiguousarray(out)

    def compose(self, other: "DihedralTransform") -> "DihedralTransform":
        """The transform equal to applying ``other`` first, then ``self``."""
        target = self.apply(other.apply(_PROBE))
        for t in ALL_TRANSFORMS:
            if np.array_equal(t.apply(_PROBE), target):
                return t
        raise AssertionError("dihedral group not closed")  # pragma: no cover

    def inverse(self) -> "DihedralTransform":
        for t in ALL_TRANSFORMS:
            if t.compose(self).id == 0:
                return t
        raise AssertionError("no inverse")  # pragma: no cover

    def __eq__(self, other):
        return isinstance(other, DihedralTransform) and other.id == self.id

    def __hash__(self):
        return hash(self.id)

    def __repr__(self):
        return f"DihedralTransform({self.id})"


_PROBE = np.arange(9).reshape(3, 3)
ALL_TRANSFORMS = tuple(DihedralTransform(i) for i in range(8))
IDENTITY, ROT90, ROT180, ROT270 = ALL_TRANSFORMS[:4]


def _transform_bbox(bbox, t: DihedralTransform, size: int):
    if bbox is None:
        return None
    x, y, w, h = bbox
    mask = np.zeros((size, size), dtype=bool)
    mask[y : y + h, x : x + w] = True
    rows, cols = np.nonzero(t.apply(mask))
    return (int(cols.min()), int(rows.min()), int(cols.max() - cols.min() + 1), int(rows.max() - rows.min() + 1))


def dihedral_augment(pair: TilePair, t: DihedralTransform | int) -> TilePair:
    """Apply the same symmetry to both images and the landslide box."""
    t = t if isinstance(t, DihedralTransform) else DihedralTransform(t)
    if pair.before.shape[-1] != pair.before.shape[-2]:
        raise PairError(f"dihedral augmentation needs square tiles, got {pair.before.shape[-2:]}")
    if t.id == 0:
        return pair
    return replace(
        pair,
        before=t.apply(pair.before),
        after=t.apply(pair.after),
        bbox=_transform_bbox(pair.bbox, t, pair.tile_size),
    )
