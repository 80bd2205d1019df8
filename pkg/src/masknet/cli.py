"""Command-line entry point: ``masknet <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 contract error (bad config, mode mismatch,
failed check, diverged training), 2 file or format error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .checkpoint import load_checkpoint
from .config import ExperimentConfig, dump_config, load_config
from .errors import ContractError, FormatError, TrainingDiverged
from .synth import SPLITS, build_dataset, load_dataset, save_dataset
from .training import evaluate, format_records, train

log = logging.getLogger("masknet")


def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args, default):
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _dataset(args, cfg):
    return load_dataset(args.data) if getattr(args, "data", None) else build_dataset(cfg.data)


def cmd_gen_data(args):
    cfg = _config(args)
    out = _out(args, os.path.join(cfg.output_dir, "data"))
    ds = build_dataset(cfg.data)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} utterances ({', '.join(f'{k}={len(v)}' for k, v in ds.splits.items())}) to {out}")


def _wer_table(report):
    lines = [f"run {report.run_id}  mode {report.mode}  seed {report.seed}"]
    for split, v in report.wer.items():
        lines.append(f"  WER {split:<14} {v:8.2f}")
    for split, v in report.probe_accuracy.items():
        lines.append(f"  probe accuracy {split:<5} {v:8.2f}")
    for split, v in report.adversary_accuracy.items():
        lines.append(f"  adversary accuracy {split:<1} {v:8.2f}")
    return "\n".join(lines) + "\n"


def cmd_train(args):
    cfg = _config(args)
    out = _out(args, os.path.join(cfg.output_dir, f"{cfg.model.mode}-s{cfg.seed}"))
    _write(os.path.join(out, "config.txt"), dump_config(cfg))
    _, report = train(cfg, _dataset(args, cfg), out_dir=out)
    table = _wer_table(report)
    _write(os.path.join(out, "report.txt"), table)
    print(table, end="")


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data) if args.data else None
    splits = [args.split] if args.split else list(SPLITS)
    rows = []
    run_id = os.path.splitext(os.path.basename(args.checkpoint))[0]
    mode = ckpt.config.model.mode
    for split in splits:
        wer, probe, adv = evaluate(ckpt, split, ds, require_mode=args.require_mode)
        rows += [(run_id, mode, k, "wer", v) for k, v in wer.items()]
        rows += [(run_id, mode, k, "probe_accuracy", v) for k, v in probe.items()]
        rows += [(run_id, mode, k, "adversary_accuracy", v) for k, v in adv.items()]
    text = format_records(rows)
    if args.out:
        _write(os.path.join(_out(args, args.out), "eval.tsv"), text)
    print(text, end="")


def cmd_matrix(args):
    from .experiments import run_matrix

    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    out = _out(args, os.path.join(cfg.output_dir, "matrix"))
    report = run_matrix(cfg, seeds, out_dir=out, log=log.info)
    print(report.format_table(), end="")


def cmd_bench(args):
    from .experiments import bench_forget_input

    cfg = _config(args)
    out = _out(args, os.path.join(cfg.output_dir, "bench"))
    report = bench_forget_input(cfg, steps=args.steps, warmup=args.warmup)
    _write(os.path.join(out, "bench.tsv"), format_records(report.records()))
    _write(os.path.join(out, "timing.tsv"), format_records(report.timing_records()))
    _write(os.path.join(out, "bench.txt"), report.format())
    print(report.format(), end="")


def cmd_gradcheck(args):
    from .gradcheck import run_suite, tolerance

    seed0 = args.seed or 0
    worst = run_suite(range(seed0, seed0 + args.seeds), modes=tuple(args.modes.split(",")))
    failed = []
    lines = []
    for name, err in worst.items():
        ok = err <= tolerance(name)
        failed += [] if ok else [name]
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name:<18} max rel err {err:.3e} (tol {tolerance(name):.0e})")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(os.path.join(_out(args, args.out), "gradcheck.txt"), text)
    print(text, end="")
    if failed:
        raise ContractError(f"gradient check failed for {', '.join(failed)}")


def build_parser():
    parser = argparse.ArgumentParser(prog="masknet", description="Adversarial-forgetting mask network toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--out", help="output directory")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "generate and save the synthetic corpus")
    p = add("train", cmd_train, "train one configuration and evaluate it")
    p.add_argument("--data", help="load a saved corpus instead of generating one")
    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--data", help="saved corpus (default: regenerate from the checkpoint config)")
    p.add_argument("--require-mode", help="refuse checkpoints trained in another mode")
    p = add("matrix", cmd_matrix, "train all four modes and print the comparison table")
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p = add("bench", cmd_bench, "time a training step with the forget net on Z versus on X")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every operator and the full model")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds")
    p.add_argument("--modes", default="baseline,multitask,grl,masknet")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except (ContractError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
