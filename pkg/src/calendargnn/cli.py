"""Command-line surface tying the modules together.

Subcommands: ingest, synth, train, evaluate, ablate, gradcheck, attn-dump.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

from .config import TASKS, VARIANTS, TrainConfig
from .data import LoadError, load_log_dir, parse_log
from .metrics import MetricReport
from .model import CalendarModel
from .synth import SynthConfig, generate_files
from .training import evaluate, run_seeds, train

ABLATION_VARIANTS = ("s-only", "minus-hour", "minus-week", "minus-weekday",
                     "minus-spatial", "full")


def _load_train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    if getattr(args, "task", None):
        overrides["task"] = args.task
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "data", None):
        overrides["data_dir"] = args.data
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    if not cfg.data_dir:
        raise LoadError("no dataset: set data_dir in the config or pass --data")
    return cfg


def cmd_ingest(args) -> int:
    dataset = parse_log(args.items, args.locations, args.sessions, args.users)
    from .data import write_log
    os.makedirs(args.out, exist_ok=True)
    write_log(dataset, args.out)
    summary = {
        "users": len(dataset.users),
        "users_with_sessions": len(dataset.graphs),
        "items": len(dataset.items),
        "locations": len(dataset.locations),
        "sessions": sum(g.num_sessions for g in dataset.graphs.values()),
        "events": sum(g.num_item_edges for g in dataset.graphs.values()),
        "dropped_sessions": dataset.dropped_sessions,
        "deduped_events": dataset.deduped_events,
    }
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(json.dumps(summary, sort_keys=True))
    if dataset.dropped_sessions:
        print(f"warning: dropped {dataset.dropped_sessions} empty sessions", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    cfg = SynthConfig.from_file(args.config) if args.config else SynthConfig()
    truth = generate_files(cfg, args.out)
    print(json.dumps(truth["totals"], sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    dataset = load_log_dir(cfg.data_dir)
    history, _ = train(cfg, dataset, out_dir=args.out)
    report = history.test
    print(f"stopped_epoch={history.stopped_epoch} best_epoch={history.best_epoch}")
    sys.stdout.write(report.as_text())
    return 0


def cmd_evaluate(args) -> int:
    expect = TrainConfig.from_file(args.config) if args.config else None
    data_dir = args.data
    if data_dir is None:
        from .model import read_checkpoint, CHECKPOINT_FILE
        path = args.checkpoint
        if os.path.isdir(path):
            path = os.path.join(path, CHECKPOINT_FILE)
        cfg, _ = read_checkpoint(path)
        data_dir = cfg.data_dir
    if not data_dir:
        raise LoadError("no dataset: pass --data or train with data_dir in the config")
    dataset = load_log_dir(data_dir)
    report = evaluate(args.checkpoint, dataset, args.split, config=expect)
    sys.stdout.write(report.as_text())
    return 0


def _emit_table(rows: list[list[str]], header: list[str], out_path: str | None) -> None:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_ablate(args) -> int:
    cfg = _load_train_config(args)
    dataset = load_log_dir(cfg.data_dir)
    rows = []
    header = None
    for variant in ABLATION_VARIANTS:
        vcfg = cfg.with_overrides(variant=variant)
        if args.seeds > 1:
            report, _ = run_seeds(vcfg, dataset, n=args.seeds, workers=args.workers)
        else:
            history, _ = train(vcfg, dataset)
            report = history.test
        if header is None:
            header = ["variant"] + report.csv_header()
        rows.append([variant] + report.csv_row())
        print(f"done: {variant}", file=sys.stderr)
    _emit_table(rows, header, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradchecks import run_all
    results = run_all(verbose=True)
    return 0 if all(r.ok for r in results) else 1


def cmd_attn_dump(args) -> int:
    model = CalendarModel.load(args.checkpoint)
    if model.config.variant != "attn":
        raise LoadError(f"checkpoint variant is {model.config.variant!r}; "
                        "attention traces need the attn variant")
    data_dir = args.data or model.config.data_dir
    if not data_dir:
        raise LoadError("no dataset: pass --data or train with data_dir in the config")
    dataset = load_log_dir(data_dir)
    if args.user not in dataset.graphs:
        raise LoadError(f"user {args.user!r} has no sessions in the dataset")
    compiled = model.compile(dataset, [args.user])
    traces: list = []
    model.predict(compiled, traces=traces)
    rows = list(traces[0].csv_rows())
    _emit_table(rows, ["kind", "direction", "unit", "weight"], args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="calendargnn",
                                description="Spatiotemporal behavior modeling engine")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", help="validate and bundle the four CSV files")
    sp.add_argument("--items", required=True)
    sp.add_argument("--locations", required=True)
    sp.add_argument("--sessions", required=True)
    sp.add_argument("--users", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_ingest)

    sp = sub.add_parser("synth", help="generate a synthetic planted-pattern log")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="train one variant and write a checkpoint")
    sp.add_argument("--task", choices=TASKS)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--config")
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on one split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "validation", "test"), default="test")
    sp.add_argument("--data")
    sp.add_argument("--config")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("ablate", help="train all ablation variants and tabulate")
    sp.add_argument("--task", choices=TASKS)
    sp.add_argument("--config")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--seeds", type=int, default=1)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="run the gradient-integrity suite")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("attn-dump", help="dump one user's attention weights as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--user", required=True)
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_attn_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (LoadError, ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
