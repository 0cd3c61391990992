"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigFileError, RunConfig, load_config
from .evaluation import localization_distance, locate_source
from .harness import Campaign, Model, evaluate, model_from_checkpoint, train
from .simdata import GridMap, MapFormatError, SampleMask, generate_dataset, read_map, tx_onehot, write_map

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _pixel(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROW,COL, got {text!r}") from None
    return r, c


def _existing(text: str) -> Path:
    p = Path(text)
    if not p.exists():
        raise argparse.ArgumentTypeError(f"no such file: {text}")
    return p


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=_existing, help="INI config file")
    p.add_argument("--seed", type=int, help="run and model seed")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="dataset directory to ingest instead of synthesizing")
    p.add_argument("--scenario", type=int, choices=(1, 2, 3))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="radiomap", description="Radio map estimation: data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="synthesize a dataset directory")
    g.add_argument("--regions", type=int, default=20)
    g.add_argument("--tx-per-region", type=int, default=4)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model")
    _common(t)
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("evaluate", help="run model and baselines over a campaign grid")
    _common(e)
    e.add_argument("--ckpt", action="append", default=[], type=_existing, help="checkpoint (repeatable, one per threshold)")
    e.add_argument("--campaign", action="append", default=[], metavar="KEY=V1,V2", help="e.g. omega=20,50,100,150")

    p = sub.add_parser("predict", help="run a checkpoint on one map")
    p.add_argument("--ckpt", required=True, type=_existing)
    p.add_argument("--buildings", required=True, type=_existing)
    p.add_argument("--tx", type=_pixel, help="ROW,COL (scenarios 1 and 2)")
    p.add_argument("--samples", type=_existing, help="sparse observation map (scenarios 2 and 3)")
    p.add_argument("--mask", type=_existing, help="sample mask map (scenarios 2 and 3)")
    p.add_argument("--out", required=True)

    b = sub.add_parser("baseline", help="run interpolators without a model")
    _common(b)
    b.add_argument("--method", choices=sorted(baselines.METHODS), action="append")
    b.add_argument("--samples", type=_existing, help="single sparse map; omit to run a campaign")
    b.add_argument("--mask", type=_existing, help="mask map for --samples (default: nonzero pixels)")
    b.add_argument("--campaign", action="append", default=[], metavar="KEY=V1,V2")

    lo = sub.add_parser("locate", help="estimate the transmitter position on a map")
    lo.add_argument("--pred", required=True, type=_existing)
    lo.add_argument("--truth-tx", type=_pixel)
    return parser


def _config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"run.seed={args.seed}", f"model.seed={args.seed}"]
    if args.out:
        overrides.append(f"run.output={args.out}")
    if args.data:
        overrides += ["dataset.source=ingest", f"dataset.path={args.data}"]
    if args.scenario:
        overrides.append(f"scenario.scenario={args.scenario}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"schedule.epochs={args.epochs}")
    if getattr(args, "method", None):
        overrides.append("evaluate.baselines=" + ",".join(args.method))
    return load_config(args.config, overrides)


def _mask_from_map(m: GridMap) -> SampleMask:
    mask = m.values > 0
    pts = [tuple(map(int, p)) for p in np.argwhere(mask)]
    return SampleMask(mask, pts, "file", 0)


def _cmd_gen_data(args) -> int:
    entries = generate_dataset(args.out, args.regions, args.tx_per_region, args.size, args.seed)
    print(f"wrote {args.regions} building maps and {len(entries)} gain maps to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _config(args)
    res = train(cfg, on_epoch=lambda e: print(e.line(), flush=True))
    print(f"best epoch {res.best_epoch}: {res.best_path}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    cfg = _config(args)
    camp = Campaign.parse(args.campaign)
    report = evaluate(cfg, args.ckpt, camp, out_dir=cfg.output)
    print(f"{len(report.records)} records; report at {Path(cfg.output) / 'report.csv'}")
    if report.nmse_excluded:
        print(f"warning: {report.nmse_excluded} maps with constant truth excluded from NMSE", file=sys.stderr)
    return EXIT_OK


def _cmd_predict(args) -> int:
    ck = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ck)
    scenario = ck.config["model"]["scenario"]
    b = read_map(args.buildings, kind="buildings")
    if scenario in (1, 2) and args.tx is None:
        raise UsageError(f"scenario {scenario} checkpoint needs --tx")
    if scenario in (2, 3) and args.samples is None:
        raise UsageError(f"scenario {scenario} checkpoint needs --samples")
    chans = [b.values]
    if scenario in (1, 2):
        chans.append(tx_onehot(b.shape, args.tx).values)
    if scenario in (2, 3):
        obs = read_map(args.samples, kind="samples")
        chans.append(obs.values)
        if scenario == 3:
            mask = read_map(args.mask).values > 0 if args.mask else obs.values > 0
            chans.append(mask.astype(np.float64))
    pred = model.predict(np.stack(chans)[None])[0]
    write_map(GridMap(np.clip(pred, 0, 1), "pathloss"), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_baseline(args) -> int:
    if args.samples is None:
        cfg = _config(args)
        if cfg.scenario.scenario == 1:
            raise UsageError("baselines need sparse samples; use scenario 2 or 3")
        report = evaluate(cfg, [], Campaign.parse(args.campaign), out_dir=cfg.output)
        print(f"{len(report.records)} records; report at {Path(cfg.output) / 'report.csv'}")
        return EXIT_OK
    if not args.out:
        raise UsageError("--out is required with --samples")
    obs = read_map(args.samples, kind="samples")
    mask = _mask_from_map(read_map(args.mask) if args.mask else obs)
    methods = args.method or ["idw"]
    out = Path(args.out)
    for name in methods:
        path = out if len(methods) == 1 and out.suffix else out / f"{name}.rmap"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_map(baselines.run_baseline(name, obs, mask), path)
        print(f"{name}: wrote {path}")
    return EXIT_OK


def _cmd_locate(args) -> int:
    est = locate_source(read_map(args.pred))
    print(f"estimated {est[0]},{est[1]}")
    if args.truth_tx is not None:
        print(f"distance {localization_distance(est, args.truth_tx):.6f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "predict": _cmd_predict,
    "baseline": _cmd_baseline,
    "locate": _cmd_locate,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigFileError) as exc:
        print(f"radiomap {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, MapFormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"radiomap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
