"""Grouped k-fold cross-validation, the training loop and balanced accuracy."""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from lsw import ops
from lsw.adam import AdamState, NonFiniteGradient, adam_step
from lsw.dataset import Site
from lsw.model import Network, NetworkConfig, build_network, forward, stack_pairs, with_seed
from lsw.pairs import DihedralTransform, TilePair
from lsw.seeding import derive_seed
from lsw.tensor import Tape, backward

log = logging.getLogger("lsw")

METRICS_HEADER = "# accuracies are per-tile; columns: epoch,train_loss,train_bal_acc,eval_bal_acc"


class TrainingError(ValueError):
    pass


class LeakageError(TrainingError):
    pass


class MetricError(ValueError):
    pass


class NumericalAbort(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    folds: int = 5
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    augment: bool = True
    tiles_per_site: int = 2
    master_seed: int = 0
    threshold: float = 0.5

    def validate(self, n_sites: int | None = None) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if n_sites is not None and self.folds > n_sites:
            raise ValueError(f"{self.folds} folds but only {n_sites} sites")


# ---------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: dict[str, int]
    k: int

    def sites_in(self, fold: int) -> list[str]:
        return [s for s, f in self.fold_of.items() if f == fold]

    def sizes(self) -> list[int]:
        return [len(self.sites_in(f)) for f in range(self.k)]


def kfold_split(sites: Sequence[str], k: int, seed: int, strata: Sequence[int] | None = None) -> FoldAssignment:
    """Seeded permutation of the sites, then round-robin fold assignment.

    With ``strata`` (one key per site) each stratum is permuted on its own
    and the strata are dealt one after another, so every fold receives a
    near-equal share of each stratum. Fold sizes still differ by at most 1.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if k > len(sites):
        raise ValueError(f"k={k} exceeds the number of sites ({len(sites)})")
    if len(set(sites)) != len(sites):
        raise ValueError("site ids must be unique")
    rng = np.random.default_rng(seed)
    if strata is None:
        order = list(rng.permutation(len(sites)))
    else:
        if len(strata) != len(sites):
            raise ValueError(f"{len(strata)} strata keys for {len(sites)} sites")
        order = []
        for key in sorted(set(strata)):
            members = np.array([i for i, s in enumerate(strata) if s == key])
            order += list(members[rng.permutation(len(members))])
    return FoldAssignment({sites[j]: pos % k for pos, j in enumerate(order)}, k)


def _pair_digest(p: TilePair) -> bytes:
    h = hashlib.sha1(np.ascontiguousarray(p.before).tobytes())
    h.update(np.ascontiguousarray(p.after).tobytes())
    return h.digest()


def check_grouping(train_pairs: Sequence[TilePair], eval_pairs: Sequence[TilePair]) -> None:
    """Raise :class:`LeakageError` if a site or an identical tile appears on both sides."""
    shared = {p.source_site for p in train_pairs} & {p.source_site for p in eval_pairs}
    if shared:
        raise LeakageError(f"sites in both training and evaluation: {sorted(shared)}")
    seen = {_pair_digest(p) for p in eval_pairs}
    for p in train_pairs:
        if _pair_digest(p) in seen:
            raise LeakageError(f"training tile from {p.source_site!r} duplicates an evaluation tile")


# ---------------------------------------------------------------- metrics


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def add(self, predicted: np.ndarray, labels: np.ndarray) -> None:
        predicted = np.asarray(predicted).astype(bool)
        labels = np.asarray(labels).astype(bool)
        self.tp += int(np.sum(predicted & labels))
        self.fp += int(np.sum(predicted & ~labels))
        self.tn += int(np.sum(~predicted & ~labels))
        self.fn += int(np.sum(~predicted & labels))


def balanced_accuracy(c: ConfusionCounts) -> float:
    """Mean of the per-class recalls."""
    if c.tp + c.fn == 0 or c.tn + c.fp == 0:
        raise MetricError(f"balanced accuracy undefined with a class absent: {c}")
    return (c.tp / (c.tp + c.fn) + c.tn / (c.tn + c.fp)) / 2


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    train_loss: float
    train_bal_acc: float
    eval_bal_acc: float | None

    def csv(self) -> str:
        ev = "" if self.eval_bal_acc is None else repr(self.eval_bal_acc)
        return f"{self.epoch},{self.train_loss!r},{self.train_bal_acc!r},{ev}"


# ---------------------------------------------------------------- loop


def evaluate(net: Network, pairs: Sequence[TilePair], threshold: float = 0.5, batch_size: int = 32) -> ConfusionCounts:
    """Tally predictions at ``threshold`` (``p >= threshold`` is positive). Weights untouched."""
    counts = ConfusionCounts()
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        probs = forward(net, stack_pairs(chunk, net.dtype)).data
        counts.add(probs >= threshold, np.array([p.label for p in chunk]))
    return counts


def train(
    net: Network,
    train_pairs: Sequence[TilePair],
    eval_pairs: Sequence[TilePair] | None,
    cfg: TrainConfig,
    seed: int | None = None,
    on_epoch: Callable[[MetricsRecord], None] | None = None,
) -> tuple[Network, list[MetricsRecord]]:
    """Train ``net`` in place for ``cfg.epochs`` epochs.

    Each epoch keeps every example of the minority class and an equal-size
    random subset of the majority class, shuffles, and draws one dihedral
    transform per example when augmentation is on. The train accuracy is
    tallied from the predictions made during the epoch.
    """
    cfg.validate()
    seed = cfg.master_seed if seed is None else seed
    pos = [p for p in train_pairs if p.label == 1]
    neg = [p for p in train_pairs if p.label == 0]
    if not pos or not neg:
        raise TrainingError(f"training set needs both classes (positives={len(pos)}, negatives={len(neg)})")
    eval_pairs = list(eval_pairs or [])

    state = AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    records = []
    n = min(len(pos), len(neg))
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng(derive_seed(seed, epoch))
        picked = [pos[i] for i in sorted(rng.choice(len(pos), n, replace=False))]
        picked += [neg[i] for i in sorted(rng.choice(len(neg), n, replace=False))]
        order = rng.permutation(len(picked))
        tforms = rng.integers(0, 8, size=len(picked)) if cfg.augment else np.zeros(len(picked), dtype=int)

        loss_sum = 0.0
        counts = ConfusionCounts()
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = [picked[i] for i in idx]
            x = stack_pairs(batch, net.dtype)
            if cfg.augment:
                x = np.stack([DihedralTransform(int(tforms[i])).apply(xi) for i, xi in zip(idx, x)])
            y = np.array([p.label for p in batch], dtype=np.float64)
            with Tape() as tape:
                probs = forward(net, x)
                loss = ops.bce_loss(probs, y)
            if not math.isfinite(loss.value):
                raise NumericalAbort(f"non-finite loss at epoch {epoch}, batch {b}")
            backward(loss, tape)
            try:
                adam_step(net.params, [p.grad for p in net.params], state)
            except NonFiniteGradient as exc:
                raise NumericalAbort(f"epoch {epoch}, batch {b}: {exc}") from None
            loss_sum += loss.value * len(batch)
            counts.add(probs.data >= cfg.threshold, y)

        if not net.all_finite():
            raise NumericalAbort(f"non-finite weights after epoch {epoch}")
        ev = balanced_accuracy(evaluate(net, eval_pairs, cfg.threshold)) if eval_pairs else None
        rec = MetricsRecord(epoch, loss_sum / len(order), balanced_accuracy(counts), ev)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d %s", epoch, rec.csv())
    return net, records


# ---------------------------------------------------------------- cross-validation


@dataclass
class FoldResult:
    fold: int
    eval_sites: list[str]
    score: float
    records: list[MetricsRecord]


@dataclass
class CVResult:
    folds: list[FoldResult]
    assignment: FoldAssignment
    fold_scores: list[float] = field(init=False)
    mean: float = field(init=False)

    def __post_init__(self):
        self.fold_scores = [f.score for f in self.folds]
        self.mean = float(np.mean(self.fold_scores))


def _pairs_of(sites: Sequence[Site]) -> list[TilePair]:
    return [p for s in sites for p in s.pairs]


def _run_fold(fold, train_sites, eval_sites, cfg, net_config) -> FoldResult:
    train_pairs, eval_pairs = _pairs_of(train_sites), _pairs_of(eval_sites)
    check_grouping(train_pairs, eval_pairs)
    net = build_network(with_seed(net_config, derive_seed(cfg.master_seed, fold, 1)))
    net, records = train(net, train_pairs, eval_pairs, cfg, seed=derive_seed(cfg.master_seed, fold, 2))
    log.info("fold %d: eval balanced accuracy %.4f", fold, records[-1].eval_bal_acc)
    return FoldResult(fold, [s.site_id for s in eval_sites], records[-1].eval_bal_acc, records)


def cross_validate(
    sites: Sequence[Site],
    cfg: TrainConfig,
    net_config: NetworkConfig | None = None,
    jobs: int = 1,
) -> CVResult:
    """Grouped k-fold: every site's tiles stay in one fold.

    Each fold trains a freshly initialised network on the other folds and
    scores it on its own sites after the last epoch.
    """
    cfg.validate(len(sites))
    if net_config is None:
        net_config = NetworkConfig.ledger(tile_size=sites[0].pairs[0].tile_size)
    by_id = {s.site_id: s for s in sites}
    # stratify on "has a positive pair" so negative-only sites cannot fill a fold
    strata = [int(1 in s.labels) for s in sites]
    assignment = kfold_split([s.site_id for s in sites], cfg.folds, cfg.master_seed, strata)
    plans = []
    for fold in range(cfg.folds):
        held = set(assignment.sites_in(fold))
        eval_sites = [by_id[s] for s in sorted(held)]
        train_sites = [s for s in sites if s.site_id not in held]
        labels = {p.label for s in eval_sites for p in s.pairs}
        if labels != {0, 1}:
            raise TrainingError(f"fold {fold} evaluation sites {sorted(held)} hold a single class {sorted(labels)}")
        plans.append((fold, train_sites, eval_sites, cfg, net_config))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, *zip(*plans)))
    else:
        results = [_run_fold(*plan) for plan in plans]
    return CVResult(results, assignment)


def format_metrics(folds: Sequence[FoldResult] | None = None, records: Sequence[MetricsRecord] | None = None) -> str:
    """Metrics log text: epoch lines, a ``fold,k,score`` line after each fold
    and a closing ``mean,score`` line for cross-validation."""
    lines = [METRICS_HEADER]
    if folds is not None:
        for f in folds:
            lines += [r.csv() for r in f.records]
            lines.append(f"fold,{f.fold},{f.score!r}")
        lines.append(f"mean,{float(np.mean([f.score for f in folds]))!r}")
    if records is not None:
        lines += [r.csv() for r in records]
    return "\n".join(lines) + "\n"


def write_metrics(path, text: str) -> None:
    Path(path).write_text(text)
