"""Command line entry point: ``cpfd run|synth|slice|eval|dump-pseudo``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .corpus import (
    SLICE_POLICIES, FormatError, SynthConfig, build_schedule, entity_types,
    generate_synthetic, read_conll, slice_and_mask, split_corpus, write_conll,
)
from .evaluation import evaluate_sequences
from .runner import ConfigError, TrainingError, load_config, run_experiment, write_slices


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cpfd", description="Continual NER with pooled attention distillation.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train every continual step from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the output directory")

    p = sub.add_parser("synth", help="write a synthetic train/dev/test corpus")
    p.add_argument("--types", type=int, default=4)
    p.add_argument("--per-type", type=int, default=100)
    p.add_argument("--vocab", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dev-frac", type=float, default=0.15)
    p.add_argument("--test-frac", type=float, default=0.15)
    p.add_argument("--out", required=True)

    p = sub.add_parser("slice", help="split a CoNLL file into masked per-step slices")
    p.add_argument("--data", required=True)
    p.add_argument("--fg", type=int, required=True)
    p.add_argument("--pg", type=int, required=True)
    p.add_argument("--policy", choices=SLICE_POLICIES, default="first")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="entity-level F1 of a predicted CoNLL file")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)

    p = sub.add_parser("dump-pseudo", help="write VPL/CPL pseudo-label columns for a step")
    p.add_argument("--config", required=True)
    p.add_argument("--step", type=int, default=2, help="last step to train (>= 2)")
    p.add_argument("--out", help="override the output directory")
    return ap


def _config(args, **extra):
    path = Path(args.config)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = load_config(path)
    if args.out:
        extra["out"] = args.out
    return dataclasses.replace(cfg, **extra) if extra else cfg


def cmd_run(args) -> int:
    cfg = _config(args)
    report = run_experiment(cfg, on_step=lambda m: print(
        f"step {m.step}: mi-F1 {m.micro_f1:.4f} ma-F1 {m.macro_f1:.4f}", flush=True))
    print(f"mean mi-F1 {report.mean_micro_f1:.4f} ma-F1 {report.mean_macro_f1:.4f} -> {report.out_dir}")
    return 0


def cmd_dump_pseudo(args) -> int:
    if args.step < 2:
        raise ConfigError("pseudo-labels exist from step 2 on")
    cfg = _config(args, dump_pseudo=True, stop_after_step=args.step, save_checkpoints=False)
    run_experiment(cfg)
    for t in range(2, args.step + 1):
        print(Path(cfg.out) / f"pseudo_step{t}.conll")
    return 0


def cmd_synth(args) -> int:
    cfg = SynthConfig(num_types=args.types, per_type=args.per_type, vocab_size=args.vocab, seed=args.seed)
    corpus = generate_synthetic(cfg)
    parts = split_corpus(corpus, np.random.Generator(np.random.PCG64(args.seed)), args.dev_frac, args.test_frac)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "dev", "test"), parts):
        write_conll(part, out / f"{name}.conll")
        print(f"{out / (name + '.conll')}: {len(part)} sentences")
    return 0


def cmd_slice(args) -> int:
    data = read_conll(args.data)
    schedule = build_schedule(entity_types(data), args.fg, args.pg)
    steps = slice_and_mask(data, data, data, schedule, args.policy)
    out = Path(args.out)
    write_slices(steps, out)
    (out / "schedule.txt").write_text(
        "".join(f"{i}\t{' '.join(s)}\n" for i, s in enumerate(schedule.steps, 1)), encoding="utf-8")
    for d in steps:
        print(f"step {d.step} {d.train.types}: {len(d.train)} train sentences")
    return 0


def cmd_eval(args) -> int:
    pred, gold = read_conll(args.pred), read_conll(args.gold)
    if [s.tokens for s in pred] != [s.tokens for s in gold]:
        raise FormatError("pred and gold files do not contain the same tokens")
    types = entity_types(gold + pred)
    if not types:
        raise FormatError("no entity labels in either file")
    m = evaluate_sequences([s.labels for s in pred], [s.labels for s in gold], types)
    print(f"micro-F1 {m.micro_f1}")
    print(f"macro-F1 {m.macro_f1}")
    for t, row in m.per_type.items():
        print(f"  {t}\tP {row['precision']:.4f}\tR {row['recall']:.4f}\tF1 {row['f1']:.4f}\tn {row['support']}")
    return 0


COMMANDS = {"run": cmd_run, "synth": cmd_synth, "slice": cmd_slice, "eval": cmd_eval,
            "dump-pseudo": cmd_dump_pseudo}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"cpfd: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, FormatError, ValueError, TrainingError) as exc:
        print(f"cpfd: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
