"""Command line: train one experiment, run ablation grids, re-render reports.

    ccssl train --config exp.json --set lambda_c=0 --out runs/fixmatch
    ccssl ablate --preset components --seeds 0 1 2 --out runs/ablation
    ccssl ablate --grid lambda_c=0,1 --grid t_push=0,0.9 --out runs/grid
    ccssl report runs/fixmatch
    ccssl config --set tau=0.5
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import trainer as tr
from .errors import CCSSLError, ConfigError

log = logging.getLogger("ccssl")


def _config(args):
    cfg = tr.ExperimentConfig.load(args.config) if args.config else tr.ExperimentConfig()
    overrides = dict(tr.parse_override(s) for s in args.set or [])
    if getattr(args, "debug_dump", False):
        overrides["debug_dump"] = True
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg.validate()


def _print_table(rows, fields, out=None):
    """Tab-delimited block between marker lines, easy to grep or paste."""
    out = out or sys.stdout
    out.write("# ---- begin ----\n")
    out.write("\t".join(fields) + "\n")
    for row in rows:
        vals = []
        for f in fields:
            v = row.get(f)
            vals.append("" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v)))
        out.write("\t".join(vals) + "\n")
    out.write("# ---- end ----\n")


def cmd_config(args):
    print(json.dumps(_config(args).to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_train(args):
    cfg = _config(args)

    def progress(rep):
        if rep.step % max(1, cfg.eval_interval) == 0:
            log.info("step %d  loss %.4f  mask %.3f", rep.step, rep.loss, rep.mask_rate)

    res = tr.run_experiment(cfg, args.out, figures=not args.no_figures, on_step=progress)
    _print_table(res.records, ["step", "L_x", "L_u", "L_c", "mask_rate", "top1", "top5",
                               "pseudo_label_accuracy", "ood_mask_rate"])
    _print_table([res.summary], tr.SUMMARY_FIELDS)
    if args.out:
        print(f"outputs written to {args.out}")
    return 0


def parse_grid(specs):
    """``["t_push=0,0.9", "lambda_c=0,1"]`` -> ``{"t_push": [0, 0.9], ...}``."""
    axes = {}
    for spec in specs:
        key, raw = tr.parse_override(spec)
        values = raw if isinstance(raw, list) else str(raw).split(",")
        parsed = []
        for v in values:
            if isinstance(v, str):
                try:
                    v = json.loads(v)
                except json.JSONDecodeError:
                    pass
            parsed.append(v)
        axes[key] = parsed
    return axes


def cmd_ablate(args):
    base = _config(args)
    if args.grid:
        cells = tr.grid_cells(parse_grid(args.grid))
    else:
        if args.preset not in tr.PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(tr.PRESETS)}")
        cells = tr.PRESETS[args.preset]
    log.info("%d cells x %d seeds", len(cells), len(args.seeds))
    rows, agg = tr.run_grid(base, cells, args.seeds, args.out, workers=args.workers,
                            figures=not args.no_figures)
    _print_table(rows, ["cell", "seed", "top1", "best_pseudo_label_accuracy", "mean_ood_mask_rate"])
    _print_table(agg, ["cell", "runs"] + [f"{m}_{s}" for m in tr.AGG_METRICS for s in ("mean", "std")])
    return 0


def cmd_report(args):
    """Rebuild figures and the summary table from a finished run directory."""
    from . import plotting

    run = args.run_dir
    with open(os.path.join(run, "metrics.jsonl")) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records:
        raise ConfigError(f"{run}: metrics.jsonl is empty")
    cfg = tr.ExperimentConfig.load(os.path.join(run, "config.json"))
    plotting.plot_training_curves(records, os.path.join(run, "curves.png"), title=cfg.name)
    conf_path = os.path.join(run, "confusion.csv")
    if os.path.exists(conf_path):
        counts = np.loadtxt(conf_path, delimiter=",", dtype=np.int64, ndmin=2)
        plotting.plot_confusion(counts, os.path.join(run, "confusion.png"))
    _print_table([tr.summarize(cfg, records)], tr.SUMMARY_FIELDS)
    print(f"figures written to {run}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ccssl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_flags(sp):
        sp.add_argument("--config", help="JSON experiment config (defaults if omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field; dotted keys reach synth.*; repeatable")

    sp = sub.add_parser("config", help="print the resolved config as JSON")
    config_flags(sp)
    sp.set_defaults(func=cmd_config)

    sp = sub.add_parser("train", help="run one experiment")
    config_flags(sp)
    sp.add_argument("--out", help="output directory for metrics, checkpoint and figures")
    sp.add_argument("--debug-dump", action="store_true",
                    help="write contrastive matrices to contrastive_debug.jsonl every debug_interval steps")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ablate", help="run an ablation grid over seeds")
    config_flags(sp)
    sp.add_argument("--preset", default="components", help=f"one of {sorted(tr.PRESETS)}")
    sp.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                    help="custom axis; repeat for a cartesian product (replaces --preset)")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--workers", type=int, default=1, help="parallel processes")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="re-render figures and summary from a run directory")
    sp.add_argument("run_dir")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CCSSLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
