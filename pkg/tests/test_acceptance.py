"""End-to-end acceptance criteria, one test per criterion.

Each test prints a ``criterion N [PASS|FAIL]`` line (collected again in the
terminal summary). Criteria 5 and 6 train 2 x 5 folds x 120 epochs and take
roughly ten minutes on one CPU core.
"""

import datetime as dt
import time
import warnings

import numpy as np
import pytest

from lsw import ops
from lsw.catalog import parse_catalog, serialize_catalog
from lsw.dataset import load_scene_dir, prepare_sites
from lsw.pairs import ALL_TRANSFORMS, TilePair, dihedral_augment
from lsw.raster import RasterScene, load_raster, write_raster
from lsw.synthetic import generate_dataset, heuristic_classify
from lsw.tensor import Tensor
from lsw.train import (
    ConfusionCounts,
    LeakageError,
    TrainConfig,
    balanced_accuracy,
    check_grouping,
    cross_validate,
    format_metrics,
    kfold_split,
)
from conftest import op_gradient_error, report_criterion, toy_network_gradient_error
from oracles import naive_conv3d

SEEDS = 100
TOL = 1e-4


# ---------------------------------------------------------------- 1


def _op_cases(rng):
    """(name, build, arrays) for every differentiable operation at float64."""
    away = lambda shape: rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.05, 2.0, size=shape)
    labels = rng.integers(0, 2, 5)
    # distinct values well apart so no FD step swaps a pooling argmax
    pool_in = (rng.permutation(2 * 2 * 2 * 4 * 4).reshape(2, 2, 2, 4, 4) + rng.uniform(0, 0.5, (2, 2, 2, 4, 4))) / 7.0
    stride = tuple(int(v) for v in rng.integers(1, 3, 3))
    pad = tuple(int(v) for v in rng.integers(0, 2, 3))
    return [
        ("conv3d", lambda x, w, b: ops.conv3d(x, w, b, stride, pad),
         [rng.standard_normal((2, 2, 3, 4, 4)), rng.standard_normal((3, 2, 2, 2, 2)), rng.standard_normal(3)]),
        ("maxpool3d", lambda x: ops.maxpool3d(x, (1, 2, 2)), [pool_in]),
        ("affine", ops.affine, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)]),
        ("relu", ops.relu, [away((3, 4))]),
        ("sigmoid", ops.sigmoid, [rng.standard_normal((3, 4)) * 2]),
        ("bce_mean", lambda p: ops.bce_loss(p, labels), [rng.uniform(0.05, 0.95, 5)]),
        ("bce_sum", lambda p: ops.bce_loss(p, labels, "sum"), [rng.uniform(0.05, 0.95, 5)]),
        ("global_avg_pool", ops.global_avg_pool, [rng.standard_normal((2, 3, 1, 2, 2))]),
        ("reshape", lambda x: ops.reshape(x, (4, 3)), [rng.standard_normal((3, 4))]),
    ]


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(SEEDS):
        rng = np.random.default_rng(seed)
        for name, build, arrays in _op_cases(rng):
            worst[name] = max(worst.get(name, 0.0), op_gradient_error(build, arrays, seed=seed))
    worst["network(tile 8)"] = max(toy_network_gradient_error(seed) for seed in range(SEEDS))
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < TOL and elapsed < 60
    report_criterion(1, "gradient oracle", ok, f"{len(worst)} ops x {SEEDS} seeds, worst rel err {top:.2e} ({max(worst, key=worst.get)}), {elapsed:.1f}s")
    assert top < TOL, worst
    assert elapsed < 60


# ---------------------------------------------------------------- 2


def test_criterion_2_convolution_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n, c, f = (int(v) for v in rng.integers(1, [3, 4, 5]))
        d, h, w = int(rng.integers(1, 5)), int(rng.integers(3, 9)), int(rng.integers(3, 9))
        pad = tuple(int(v) for v in rng.integers(0, 2, 3))
        kern = tuple(int(rng.integers(1, min(s + 2 * p, 3) + 1)) for s, p in zip((d, h, w), pad))
        stride = tuple(int(v) for v in rng.integers(1, 3, 3))
        x = rng.standard_normal((n, c, d, h, w)).astype(np.float32)
        wt = rng.standard_normal((f, c, *kern)).astype(np.float32)
        b = rng.standard_normal(f).astype(np.float32)
        got = ops.conv3d(Tensor(x), Tensor(wt), Tensor(b), stride, pad).data
        ref = naive_conv3d(x.astype(np.float64), wt.astype(np.float64), b.astype(np.float64), stride, pad)
        assert got.shape == ref.shape
        worst = max(worst, float(np.abs(got - ref).max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 30
    report_criterion(2, "convolution oracle", ok, f"200 cases, max abs err {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-5
    assert elapsed < 30


# ---------------------------------------------------------------- 3


def test_criterion_3_metric_exactness():
    c = ConfusionCounts()
    labels = np.array([1] * 7 + [0] * 13)
    c.add(np.ones_like(labels, dtype=bool), labels)
    degenerate = balanced_accuracy(c)
    hand = balanced_accuracy(ConfusionCounts(tp=3, fn=1, tn=2, fp=2))
    ok = degenerate == 0.5 and abs(hand - 0.625) < 1e-12
    report_criterion(3, "metric exactness", ok, f"all-positive predictor {degenerate!r}, hand case {hand!r}")
    assert degenerate == 0.5
    assert abs(hand - 0.625) < 1e-12


# ---------------------------------------------------------------- 4


def test_criterion_4_fold_protocol():
    sites = [f"site_{i:02d}" for i in range(20)]
    fa = kfold_split(sites, 5, 0)
    folds = [set(fa.sites_in(f)) for f in range(5)]
    disjoint = all(not (a & b) for i, a in enumerate(folds) for b in folds[i + 1 :])
    partition = set().union(*folds) == set(sites) and [len(f) for f in folds] == [4] * 5

    rng = np.random.default_rng(4)
    tile = lambda lbl, site: TilePair(rng.random((5, 8, 8)), rng.random((5, 8, 8)), lbl, (0, 0, 2, 2) if lbl else None, site, 0, 1)
    eval_pairs = [tile(1, "site_00"), tile(0, "site_00")]
    train_pairs = [tile(1, "site_01"), tile(0, "site_02")]
    check_grouping(train_pairs, eval_pairs)
    e = eval_pairs[0]
    planted = TilePair(e.before.copy(), e.after.copy(), 1, e.bbox, "site_03", 0, 1)
    rejected = 0
    for leak in (planted, eval_pairs[1]):
        try:
            check_grouping(train_pairs + [leak], eval_pairs)
        except LeakageError:
            rejected += 1
    ok = disjoint and partition and rejected == 2
    report_criterion(4, "fold protocol", ok, f"fold sizes {[len(f) for f in folds]}, disjoint={disjoint}, leaks rejected {rejected}/2")
    assert disjoint and partition
    assert rejected == 2


# ---------------------------------------------------------------- 5 and 6

SCENE = 96
TILE = 64
MASTER_SEED = 0


@pytest.fixture(scope="module")
def e2e_sites(tmp_path_factory):
    root = generate_dataset(16, 16, SCENE, MASTER_SEED, tmp_path_factory.mktemp("e2e"))
    entries = parse_catalog((root / "catalog.csv").read_text())
    return prepare_sites(entries, load_scene_dir(root / "scenes"), TILE, TrainConfig().tiles_per_site, MASTER_SEED)


@pytest.fixture(scope="module")
def first_cv(e2e_sites):
    t0 = time.perf_counter()
    result = cross_validate(e2e_sites, TrainConfig(master_seed=MASTER_SEED))
    return result, format_metrics(result.folds), time.perf_counter() - t0


def test_criterion_5_synthetic_end_to_end(e2e_sites, first_cv):
    c = ConfusionCounts()
    for s in e2e_sites:
        for p in s.pairs:
            c.add(np.array([heuristic_classify(p)]), np.array([p.label]))
    heuristic = balanced_accuracy(c)
    result, _, elapsed = first_cv
    cfg = TrainConfig()
    ok = heuristic >= 0.95 and result.mean >= 0.90 and elapsed <= 15 * 60 and cfg.epochs <= 120
    scores = ", ".join(f"{s:.3f}" for s in result.fold_scores)
    report_criterion(
        5, "synthetic end-to-end", ok,
        f"{len(e2e_sites)} sites, heuristic {heuristic:.3f}, fold scores [{scores}], mean {result.mean:.3f}, {elapsed:.0f}s",
    )
    assert heuristic >= 0.95
    assert result.mean >= 0.90
    assert elapsed <= 15 * 60


def test_criterion_6_determinism(e2e_sites, first_cv):
    _, log1, _ = first_cv
    log2 = format_metrics(cross_validate(e2e_sites, TrainConfig(master_seed=MASTER_SEED)).folds)
    ok = log1.encode() == log2.encode()
    report_criterion(6, "determinism", ok, f"metrics logs {len(log1.splitlines())} lines, byte-identical={ok}")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_augmentation_group():
    rng = np.random.default_rng(7)
    closure = inverse = multiset = True
    for _ in range(20):
        size = int(rng.integers(2, 12))
        tile = rng.standard_normal((5, size, size))
        for s in ALL_TRANSFORMS:
            for t in ALL_TRANSFORMS:
                u = s.compose(t)
                closure &= u in ALL_TRANSFORMS and np.array_equal(s.apply(t.apply(tile)), u.apply(tile))
            inverse &= np.array_equal(s.inverse().apply(s.apply(tile)), tile)
            inverse &= s.compose(s.inverse()).id == 0
            pair = TilePair(tile, tile[::-1].copy(), 0, None, "s", 0, 1)
            q = dihedral_augment(pair, s)
            for a, b in ((pair.before, q.before), (pair.after, q.after)):
                multiset &= all(np.array_equal(np.sort(a[k], axis=None), np.sort(b[k], axis=None)) for k in range(5))
    ok = closure and inverse and multiset
    report_criterion(7, "augmentation group", ok, f"closure={closure}, inverses={inverse}, multisets preserved={multiset}")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_8_format_round_trips(tmp_path):
    rng = np.random.default_rng(8)
    raster_ok = True
    for k in range(10):
        planes = rng.uniform(0, 10000, (5, 32, 32)).astype(np.float32)
        planes[4] = np.repeat(np.repeat(planes[4, ::2, ::2], 2, 0), 2, 1)
        mask = (rng.random((32, 32)) < 0.1).astype(np.float32) if k % 2 else None
        scene = RasterScene(planes, (2, 3, 4, 8, 12), int(rng.integers(0, 2**40)), tuple(rng.standard_normal(6)), None, mask)
        a, b = tmp_path / f"a{k}.lsrs", tmp_path / f"b{k}.lsrs"
        write_raster(scene, a)
        write_raster(load_raster(a), b)
        raster_ok &= a.read_bytes() == b.read_bytes()

    raw = "\n".join(
        [
            "location;date;size;type;lat;lon;accuracy_km;rain_mm;humidity_pct;cloud_pct",
            "Hill A;06/17/2017;catastrophic;landslide;71,53659933;-53,20874578;0,5;;;",
            "Ridge B;23/08/2017;very large;debris flow;46,29694;9,595744;1;120,5;88;10",
            "Slope C;2016-08-19;large;mudslide;-6.311708;106.801076;;;;",
        ]
    )
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        first = serialize_catalog(parse_catalog(raw))
        second = serialize_catalog(parse_catalog(first))
        third = serialize_catalog(parse_catalog(second))
    catalog_ok = first == second == third and parse_catalog(first)[1].event_date == dt.date(2017, 8, 23)
    ok = raster_ok and catalog_ok
    report_criterion(8, "format round trips", ok, f"LSRS byte-identical={raster_ok}, catalog stable after one pass={catalog_ok}")
    assert ok
