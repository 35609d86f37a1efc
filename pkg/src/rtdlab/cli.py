"""Command-line entry point: ``rtdlab {pretrain,eval,flops,curves}``.

Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError
from .corpus import CorpusError
from .evaluation import EvaluationError
from .flopcount import format_report, forward_flops, train_step_flops, write_flops_csv
from .runs import (EVAL_METRICS, ConfigError, RunError, curve_rows, load_data, parse_overrides, resolve_config,
                   run_eval, run_pretrain, variant_means, write_curves)
from .trainer import effective_model_config

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rtdlab", description="Replaced-token-detection pre-training lab.")
    sub = p.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("pretrain", help="train one variant into a run directory",
                         epilog="Any config key may be overridden with --key value (e.g. --variant bert --steps 500).")
    pre.add_argument("--config", help="flat key = value config file")

    ev = sub.add_parser("eval", help="evaluate a checkpoint and append rows to its run's eval.csv")
    ev.add_argument("checkpoint", help="checkpoint file or run directory")
    ev.add_argument("--what", required=True, help="one of: " + ", ".join(EVAL_METRICS))
    ev.add_argument("--seed", type=int, default=None)

    fl = sub.add_parser("flops", help="print the FLOPs breakdown for a config",
                        epilog="Accepts the same --config and --key value overrides as pretrain.")
    fl.add_argument("--config")
    fl.add_argument("--csv", default=None, help="also write the breakdown as CSV")

    cu = sub.add_parser("curves", help="join probe accuracy at matched FLOPs across run directories")
    cu.add_argument("runs", nargs="+", help="run directories")
    cu.add_argument("--out", default="curves.csv")
    cu.add_argument("--figure", default=None, help="figure path (default: next to --out, .png)")
    cu.add_argument("--no-figure", action="store_true")
    return p


def cmd_pretrain(args, extra) -> int:
    cfg = resolve_config(args.config, parse_overrides(extra))
    out = run_pretrain(cfg)
    print(f"run directory: {out}")
    return EXIT_OK


def cmd_eval(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments: {' '.join(extra)}")
    if args.what not in EVAL_METRICS:
        raise ConfigError(f"what: unknown metric {args.what!r}; expected one of {', '.join(EVAL_METRICS)}")
    results, path = run_eval(args.checkpoint, args.what, args.seed)
    for name, value in results.items():
        print(f"{name},{value:.6g}")
    print(f"appended to {path}")
    return EXIT_OK


def cmd_flops(args, extra) -> int:
    cfg = resolve_config(args.config, parse_overrides(extra))
    vocab = len(load_data(cfg).vocab) if cfg.corpus != "synthetic" else cfg.syn_vocab + 3
    tcfg = cfg.train_config(vocab)
    variant = {"two-stage": "two-stage-discriminator"}.get(cfg.variant, cfg.variant)
    mcfg = effective_model_config(cfg.variant, tcfg.model)
    fwd = forward_flops(mcfg, cfg.seq_len, cfg.batch, variant, cfg.mask_frac)
    step = train_step_flops(mcfg, cfg.seq_len, cfg.batch, variant, cfg.mask_frac)
    print(format_report(fwd, f"forward ({cfg.variant}, batch {cfg.batch}, n {cfg.seq_len})"))
    print()
    print(format_report(step, "train step"))
    if args.csv:
        write_flops_csv(args.csv, {"forward": fwd, "train_step": step})
        print(f"wrote {args.csv}")
    return EXIT_OK


def cmd_curves(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments: {' '.join(extra)}")
    rows = curve_rows(args.runs)
    write_curves(rows, args.out)
    print(f"wrote {args.out}")
    for v, acc in sorted(variant_means(rows).items(), key=lambda kv: -kv[1]):
        print(f"  {v:<16} mean probe accuracy at final milestone {acc:.4f}")
    if not args.no_figure:
        fig = args.figure or str(Path(args.out).with_suffix(".png"))
        try:
            from .plotting import plot_curves
            plot_curves(rows, fig)
            print(f"wrote {fig}")
        except ImportError:
            print("matplotlib not installed; figure skipped", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "eval": cmd_eval, "flops": cmd_flops, "curves": cmd_curves}


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return EXIT_USAGE if e.code else EXIT_OK
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args, extra)
    except ConfigError as e:
        print(f"rtdlab: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RunError, CheckpointError, CorpusError, EvaluationError, FloatingPointError, ValueError, OSError) as e:
        print(f"rtdlab: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
