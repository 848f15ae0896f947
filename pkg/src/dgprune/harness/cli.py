"""Command line entry point.

Subcommands share ``--config`` (YAML file or preset name), ``--seed``
(overrides the config's seed list) and ``--out`` (overrides its output
directory). Set ``DGPRUNE_LOG_LEVEL`` (DEBUG, INFO, ...) for verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

from ..domains import dump_dataset
from ..training import TrainingDiverged
from . import plots, report
from .config import METHODS, PRESETS, load_config
from .experiment import build_data, evaluate, load_record, pretrain, run_experiment

log = logging.getLogger("dgprune")


def _config(args):
    cfg = load_config(args.config)
    return cfg.with_overrides(
        seeds=None if args.seed is None else [args.seed],
        out=args.out,
        methods=getattr(args, "method", None) or None,
    )


def cmd_gen_data(args) -> dict:
    cfg = _config(args)
    out = Path(cfg.out) / "data"
    specs = [d for g in ("source", "invasion", "unseen") for d in cfg.domains.get(g, ())]
    dump_dataset(out, specs, [cfg.data.train] * len(specs), cfg.seeds[0], cfg.image_size)
    return {"data": str(out)}


def cmd_pretrain(args) -> dict:
    cfg = _config(args)
    written = []
    for seed in cfg.seeds:
        seed_dir = Path(cfg.out) / f"seed-{seed}"
        _, history = pretrain(cfg, seed, out=seed_dir)
        curve = seed_dir / "pretrain_curve.csv"
        curve.write_text("epoch,loss,val\n" + "".join(
            f"{h['epoch']},{'' if h['loss'] is None else repr(h['loss'])},{repr(h['val'])}\n" for h in history))
        written += [str(seed_dir / "model_s.ckpt"), str(curve)]
    return {"written": written}


def _finish(cfg, records) -> dict:
    out = Path(cfg.out)
    paths = report.write_reports(cfg, records, out)
    doc = report.load_document(paths["json"])
    cmp_paths = report.write_comparison([doc], out)
    rows = report.compare([doc])
    figures = plots.render_all(doc, rows, out / "figures")
    return {k: str(v) for k, v in {**paths, **{f"comparison_{k}": v for k, v in cmp_paths.items()}}.items()} | {
        "figures": [str(p) for p in figures]}


def cmd_run(args) -> dict:
    cfg = _config(args)
    return _finish(cfg, run_experiment(cfg, Path(cfg.out)))


def cmd_evaluate(args) -> dict:
    cfg = _config(args)
    records = []
    for seed in cfg.seeds:
        data = build_data(cfg, seed)
        for method in cfg.methods:
            records.append(evaluate(cfg, load_record(Path(cfg.out), method, seed), data))
    return _finish(cfg, records)


def cmd_compare(args) -> dict:
    docs = [report.load_document(p) for p in args.reports]
    out = Path(args.out or ".")
    paths = report.write_comparison(docs, out)
    fig = plots.plot_comparison(report.compare(docs), out)
    return {k: str(v) for k, v in paths.items()} | {"figure": str(fig)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgprune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_method=False):
        p.add_argument("--config", required=True, help=f"YAML file or preset ({', '.join(sorted(PRESETS))})")
        p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        p.add_argument("--out", help="output directory (overrides the config)")
        if with_method:
            p.add_argument("--method", action="append", choices=METHODS,
                           help="restrict to these methods (repeatable)")

    common(sub.add_parser("gen-data", help="dump every configured domain to disk"))
    common(sub.add_parser("pretrain", help="train Model-S on the source domains"))
    common(sub.add_parser("run", help="pretrain, run methods, evaluate and report"), with_method=True)
    common(sub.add_parser("evaluate", help="re-evaluate saved checkpoints and report"), with_method=True)
    p = sub.add_parser("compare", help="mean ± std table over one or more report.json files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "run": cmd_run,
            "evaluate": cmd_evaluate, "compare": cmd_compare}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DGPRUNE_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001 - every failure becomes a JSON record
        record = {"error": type(e).__name__, "message": str(e), "command": args.command}
        log.debug("%s", traceback.format_exc())
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 3 if isinstance(e, (TrainingDiverged, FloatingPointError)) else 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
