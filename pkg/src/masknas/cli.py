"""Command-line front end.

Commands: search, eval, ablate, alpha-report, dataset-gen.  Exit codes are
0 on success, 2 for usage, configuration or input-format errors and 3 when
a run aborts.  Run directories live under ``--run-root`` or, if unset, the
``MASKNAS_RUN_ROOT`` environment variable (default ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import List, Optional

from . import ablation
from .config import build, read_ini, write_ini
from .data import CifarMeta, DatasetFormatError, SyntheticSpec, make_synthetic, write_cifar_binary
from .evaluate import EvalConfig, evaluate_genotype
from .records import RunRecord, alpha_report, load_snapshots
from .search import ConfigError, SearchConfig, run_search
from .space.genotype import Genotype

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3
RUN_ROOT_ENV = "MASKNAS_RUN_ROOT"

log = logging.getLogger("masknas")


class UsageError(Exception):
    """Bad input detected after argument parsing; maps to exit code 2."""


def run_root(args) -> Path:
    return Path(args.run_root or os.environ.get(RUN_ROOT_ENV) or "runs")


def _add_fields(parser: argparse.ArgumentParser, cls, skip=()) -> None:
    group = parser.add_argument_group(f"{cls.__name__} fields (override the config file)")
    for f in fields(cls):
        if f.name in skip:
            continue
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=str(f.type).upper())


def _overrides(args, cls) -> dict:
    return {f.name: getattr(args, f.name, None) for f in fields(cls)}


def _config(cls, args, section: str):
    values = read_ini(args.config, ("data", section)) if args.config else {}
    return build(cls, values, _overrides(args, cls))


def _fresh_dir(root: Path, name: str) -> Path:
    path = root / name
    n = 2
    while path.exists():
        path = root / f"{name}-{n}"
        n += 1
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_search(args) -> int:
    cfg = _config(SearchConfig, args, "search")
    root = run_root(args)
    if args.resume:
        run_dir = root / args.resume
        if not (run_dir / "checkpoint.json").exists():
            raise UsageError(f"{run_dir}: no checkpoint to resume from")
    else:
        name = args.run_name or f"search-{cfg.space}-{cfg.task.replace('+', '_')}-{cfg.input}-s{cfg.seed}"
        run_dir = _fresh_dir(root, name)
        run_dir.mkdir(parents=True)
        write_ini(run_dir / "config.ini", "search", cfg)
    rec = run_search(cfg, run_dir=run_dir, resume=bool(args.resume))
    summary = {"run_dir": str(run_dir), "status": rec.status, "epochs": len(rec.metrics),
               "genotype": rec.genotype.to_dict()}
    if rec.metrics:
        last = rec.metrics[-1]
        summary.update(skip_fraction=last["skip_fraction"], alpha_std_total=last["alpha_std_total"])
    print(json.dumps(summary))
    return EXIT_ABORT if rec.aborted else EXIT_OK


def _read_genotype(path: Path) -> Genotype:
    target = path / "genotype.json" if path.is_dir() else path
    try:
        return Genotype.from_json(target.read_text())
    except OSError as exc:
        raise UsageError(f"{target}: {exc.strerror}") from None
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"{target}: malformed genotype: {exc}") from None


def cmd_eval(args) -> int:
    cfg = _config(EvalConfig, args, "eval")
    path = Path(args.genotype)
    genotype = _read_genotype(path)
    report = evaluate_genotype(genotype, cfg)
    report["config"] = cfg.to_dict()
    out = Path(args.out) if args.out else (path if path.is_dir() else path.parent) / "eval.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps({"accuracy": report["accuracy"], "test_size": report["test_size"], "report": str(out)}))
    return EXIT_OK


def _floats(text: str, name: str, kind=float) -> List:
    try:
        return [kind(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError([f"{name}: expected a comma-separated list, got {text!r}"]) from None


def cmd_ablate(args) -> int:
    base = _config(SearchConfig, args, "search")
    patches = _floats(args.patches, "patches", int)
    ratios = _floats(args.ratios, "ratios")
    seeds = _floats(args.seeds, "seeds", int)
    root = _fresh_dir(run_root(args), args.name)
    root.mkdir(parents=True)
    rows = ablation.run_grid(base, patches, ratios, seeds, root)
    agg = ablation.aggregate(rows)
    (root / "runs.csv").write_text(ablation.to_csv(rows, ablation.RUN_COLUMNS))
    (root / "ablation.csv").write_text(ablation.to_csv(agg, ablation.AGG_COLUMNS))
    sys.stdout.write(ablation.to_csv(agg, ablation.AGG_COLUMNS))
    return EXIT_OK


def cmd_alpha_report(args) -> int:
    run_dir = Path(args.run_dir)
    snap_path = run_dir / "alpha_snapshots.npz"
    if not snap_path.exists():
        raise UsageError(f"{run_dir}: no alpha snapshots")
    snaps = load_snapshots(snap_path)
    epoch = max(snaps) if args.epoch is None else args.epoch
    if epoch not in snaps:
        raise UsageError(f"{run_dir}: no alpha snapshot for epoch {epoch} (have {sorted(snaps)})")
    meta = json.loads((run_dir / "record.json").read_text()) if (run_dir / "record.json").exists() else {}
    space = meta.get("config", {}).get("space", "darts")
    text = alpha_report(snaps[epoch], space, args.cell, epoch)
    (run_dir / f"alpha_report_{args.cell}_e{epoch}.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_dataset_gen(args) -> int:
    spec = SyntheticSpec(num_classes=args.num_classes, size=args.size, height=args.image_size,
                         width=args.image_size, seed=args.seed, noise=args.noise)
    if spec.num_classes > 256 or spec.num_classes < 2:
        raise ConfigError(["num_classes: must lie in [2, 256] for one label byte"])
    ds = make_synthetic(spec)
    out = Path(args.out) if args.out else run_root(args) / "data" / "synthetic.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = CifarMeta(num_classes=spec.num_classes, height=spec.height, width=spec.width)
    write_cifar_binary(ds, out, meta)
    meta.write(out.with_suffix(".meta"))
    print(json.dumps({"path": str(out), "records": len(ds), "record_size": meta.record_size}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="masknas", description=__doc__.splitlines()[0])
    parser.add_argument("--run-root", default=None, help=f"run directory root (default ${RUN_ROOT_ENV} or ./runs)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run an architecture search")
    p.add_argument("--config", help="INI file with [data] and [search] sections")
    p.add_argument("--run-name")
    p.add_argument("--resume", metavar="RUN_NAME", help="continue a run from its last checkpoint")
    _add_fields(p, SearchConfig)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="train a genotype from scratch and report test accuracy")
    p.add_argument("genotype", help="genotype JSON file or a run directory")
    p.add_argument("--config", help="INI file with [data] and [eval] sections")
    p.add_argument("--out", help="report path (default: eval.json next to the genotype)")
    _add_fields(p, EvalConfig)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="patch size x mask ratio grid")
    p.add_argument("--config", help="INI file with [data] and [search] sections")
    p.add_argument("--patches", default="2,4,8")
    p.add_argument("--ratios", default="0.2,0.4,0.6,0.8")
    p.add_argument("--seeds", default="0,1")
    p.add_argument("--name", default="ablation")
    _add_fields(p, SearchConfig, skip=("patch", "mask_ratio", "seed"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("alpha-report", help="per-edge softmaxed α table of a run")
    p.add_argument("run_dir")
    p.add_argument("--epoch", type=int, default=None, help="snapshot epoch (default: last)")
    p.add_argument("--cell", choices=("normal", "reduce"), default="normal")
    p.set_defaults(func=cmd_alpha_report)

    p = sub.add_parser("dataset-gen", help="write the synthetic dataset as CIFAR-style binary records")
    d = SyntheticSpec()
    p.add_argument("--out")
    p.add_argument("--num-classes", type=int, default=d.num_classes)
    p.add_argument("--size", type=int, default=d.size)
    p.add_argument("--image-size", type=int, default=d.height)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--noise", type=float, default=d.noise)
    p.set_defaults(func=cmd_dataset_gen)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure inside a run
        log.exception("run aborted")
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
