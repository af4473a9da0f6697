"""``lsw`` command line.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numerical abort. Errors print one line to stderr::

    lsw: error code=2 kind=RasterFormatError: <message>

Lines on stdout starting with ``#`` carry timing and are the only
non-reproducible output.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from lsw import BACKEND, DEFAULT_BANDS, __version__

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("lsw")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--config", type=Path, help="key=value file; explicit flags win")

    p = _Parser(prog="lsw", description="Bitemporal landslide detection with a 3D CNN.", parents=[common])
    p.add_argument("--version", action="version", version=f"lsw {__version__} ({BACKEND} kernels)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--positives", type=_nonneg_int, required=True)
    s.add_argument("--negatives", type=_nonneg_int, required=True)
    s.add_argument("--size", type=_positive_int, default=64, help="scene side in pixels")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--pre-scenes", type=_positive_int, default=2, help="pre-event scenes per site")
    s.add_argument("--clouds", type=_fraction, default=0.0, help="cloud fraction per scene")

    s = sub.add_parser("prepare", parents=[common], help="cut labelled tile pairs from scenes")
    s.add_argument("--catalog", type=Path, required=True)
    s.add_argument("--scenes", type=Path, required=True)
    s.add_argument("--tile", type=_positive_int, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--tiles-per-site", type=_positive_int, default=2)

    def add_training(sp):
        sp.add_argument("--epochs", type=_positive_int, default=120)
        sp.add_argument("--batch-size", type=_positive_int, default=8)
        sp.add_argument("--lr", type=float, default=1e-3)
        sp.add_argument("--no-augment", action="store_true", help="disable dihedral augmentation")
        sp.add_argument("--metrics", type=Path, help="metrics CSV path")

    s = sub.add_parser("train", parents=[common], help="train on every prepared site")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True, help="checkpoint path")
    add_training(s)

    s = sub.add_parser("cv", parents=[common], help="grouped k-fold cross-validation")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--folds", type=_positive_int, default=5)
    s.add_argument("--jobs", type=_positive_int, default=1, help="folds trained in parallel")
    add_training(s)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on prepared sites")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)

    s = sub.add_parser("predict", parents=[common], help="classify one before/after scene pair")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--before", type=Path, required=True)
    s.add_argument("--after", type=Path, required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    return p


def read_config_file(path: Path) -> dict[str, str]:
    values = {}
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        values[k.strip().lstrip("-")] = v.strip()
    return values


def _apply_config(parser: argparse.ArgumentParser, args, argv: list[str]) -> None:
    if args.config is None:
        return
    try:
        values = read_config_file(args.config)
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    subparser = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    flags = {opt: a for a in subparser._actions for opt in a.option_strings}  # noqa: SLF001
    given = {tok.split("=", 1)[0] for tok in argv if tok.startswith("--")}
    for key, raw in values.items():
        flag = f"--{key}"
        action = flags.get(flag)
        if action is None or key in ("config", "help"):
            raise UsageError(f"config key {key!r} is not a flag of '{args.command}'")
        if flag in given:
            continue
        if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
            value = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                value = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        setattr(args, action.dest, value)


def _setup_logging() -> None:
    level = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("LSW_LOG", "info").lower(), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(level)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> None:
    from lsw.synthetic import generate_dataset

    generate_dataset(args.positives, args.negatives, args.size, args.seed, args.out, n_pre=args.pre_scenes, cloud_fraction=args.clouds)
    print(f"wrote {args.positives + args.negatives} sites to {args.out}")


def cmd_prepare(args) -> None:
    from lsw.catalog import parse_catalog
    from lsw.dataset import load_scene_dir, prepare_sites, save_sites

    entries = parse_catalog(args.catalog.read_text())
    sites = prepare_sites(entries, load_scene_dir(args.scenes), args.tile, args.tiles_per_site, args.seed)
    save_sites(sites, args.out)
    n_pos = sum(p.label for s in sites for p in s.pairs)
    n_all = sum(len(s.pairs) for s in sites)
    print(f"prepared {len(sites)} sites: {n_pos} positive, {n_all - n_pos} negative pairs")


def _train_config(args, folds: int = 5):
    from lsw.train import TrainConfig

    return TrainConfig(
        epochs=args.epochs,
        folds=folds,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        augment=not args.no_augment,
        master_seed=args.seed,
    )


def cmd_train(args) -> None:
    from lsw.dataset import load_sites
    from lsw.model import NetworkConfig, build_network, save_checkpoint
    from lsw.train import format_metrics, train, write_metrics

    sites = load_sites(args.data)
    pairs = [p for s in sites for p in s.pairs]
    net = build_network(NetworkConfig.ledger(tile_size=pairs[0].tile_size, init_seed=args.seed))
    t0 = time.perf_counter()
    net, records = train(net, pairs, None, _train_config(args))
    save_checkpoint(net, args.out)
    if args.metrics:
        write_metrics(args.metrics, format_metrics(records=records))
    last = records[-1]
    print(f"epochs={last.epoch} train_loss={last.train_loss:.6f} train_bal_acc={last.train_bal_acc:.4f}")
    print(f"# elapsed {time.perf_counter() - t0:.1f}s")


def cmd_cv(args) -> None:
    from lsw.dataset import load_sites
    from lsw.train import cross_validate, format_metrics, write_metrics

    sites = load_sites(args.data)
    t0 = time.perf_counter()
    result = cross_validate(sites, _train_config(args, folds=args.folds), jobs=args.jobs)
    if args.metrics:
        write_metrics(args.metrics, format_metrics(folds=result.folds))
    for f in result.folds:
        print(f"fold,{f.fold},{f.score:.6f}")
    print(f"mean,{result.mean:.6f}")
    print(f"# elapsed {time.perf_counter() - t0:.1f}s")


def cmd_eval(args) -> None:
    from lsw.dataset import load_sites
    from lsw.model import load_checkpoint
    from lsw.train import MetricError, balanced_accuracy, evaluate

    net = load_checkpoint(args.checkpoint)
    pairs = [p for s in load_sites(args.data) for p in s.pairs]
    c = evaluate(net, pairs)
    print(f"tp={c.tp} fp={c.fp} tn={c.tn} fn={c.fn}")
    try:
        print(f"balanced_accuracy={balanced_accuracy(c):.6f}")
    except MetricError:
        print("balanced_accuracy=undefined")


def scene_windows(size: int, tile: int) -> list[int]:
    """Window offsets at half-tile stride that cover ``size`` completely."""
    if tile > size:
        raise ValueError(f"scene {size} px is smaller than the {tile} px tile")
    offs = list(range(0, size - tile + 1, max(1, tile // 2)))
    if offs[-1] != size - tile:
        offs.append(size - tile)
    return offs


def cmd_predict(args) -> None:
    from lsw.model import classify, forward, load_checkpoint
    from lsw.pairs import PairError
    from lsw.raster import load_raster, normalize, select_bands

    net = load_checkpoint(args.checkpoint)
    before, after = load_raster(args.before), load_raster(args.after)
    if before.planes.shape != after.planes.shape:
        raise PairError(f"scenes differ in shape: {before.planes.shape} vs {after.planes.shape}")
    if before.timestamp >= after.timestamp:
        raise PairError("--before scene is not older than --after scene")
    tile = net.config.tile_size
    b = normalize(select_bands(before, DEFAULT_BANDS))
    a = normalize(select_bands(after, DEFAULT_BANDS))
    stack = np.stack([b, a], axis=1)
    windows = [
        stack[:, :, y : y + tile, x : x + tile]
        for y in scene_windows(before.height, tile)
        for x in scene_windows(before.width, tile)
    ]
    prob = float(forward(net, np.stack(windows)).data.max())
    pred = classify(prob, args.threshold)
    print(f"label={pred.label} p={pred.probability:.9g}")


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "cv": cmd_cv,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def _fail(code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split())
    print(f"lsw: error code={code} kind={type(exc).__name__}: {msg}", file=sys.stderr)
    return code


def run_cli(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config(parser, args, argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    _setup_logging()

    from lsw.train import NumericalAbort

    try:
        COMMANDS[args.command](args)
    except NumericalAbort as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        return _fail(EXIT_DATA, exc)
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
