"""``lenctl`` command line.

Exit codes: 0 success, 1 user error (bad input, missing prerequisite,
locked run), 2 internal error.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
import traceback
from pathlib import Path

import torch

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .experiments import (
    MissingPrerequisite,
    RunLocked,
    Workspace,
    eval_spe_stage,
    eval_stage,
    ingest_corpus,
    load_extractor,
    load_policy,
    load_rl,
    load_sft,
    parse_settings,
    run_dir,
    train_rl_stage,
    train_sft_stage,
    train_spe_stage,
    write_split,
    write_synthetic_corpus,
    write_templates,
)
from .io import RecordError
from .scp import error_curve, parse_canonical

log = logging.getLogger("lenctl")


class UserError(Exception):
    pass


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True) if not isinstance(obj, str) else obj)


def _seeded(cfg: RunConfig, section: str, key: str, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    sec = dataclasses.replace(getattr(cfg, section), **{key: seed})
    return dataclasses.replace(cfg, **{section: sec})


# --- commands ---------------------------------------------------------------------------


def cmd_synth_data(cfg, ws, args):
    cfg = _seeded(cfg, "corpus", "seed", args.seed)
    if args.n is not None:
        cfg = dataclasses.replace(cfg, corpus=dataclasses.replace(cfg.corpus, n_examples=args.n))
    with run_dir(ws.root / "data", cfg, cfg.corpus.seed, "synth-data"):
        n = write_synthetic_corpus(cfg, ws)
    _print(f"wrote {n} documents to {ws.corpus}")


def cmd_ingest(cfg, ws, args):
    with run_dir(ws.root / "data", cfg, args.seed or 0, "ingest"):
        n = ingest_corpus(ws, args.path)
    _print(f"ingested {n} documents into {ws.corpus}")


def cmd_make_templates(cfg, ws, args):
    n = write_templates(cfg, ws)
    _print(f"wrote {n} templates to {ws.templates}")


def cmd_split_templates(cfg, ws, args):
    cfg = _seeded(cfg, "templates", "split_seed", args.seed)
    with run_dir(ws.root / "templates", cfg, cfg.templates.split_seed, "split-templates"):
        n_in, n_out = write_split(cfg, ws)
    _print(f"split {n_in} in-sample / {n_out} out-sample templates into {ws.split}")


def cmd_train_spe(cfg, ws, args):
    _print(train_spe_stage(_seeded(cfg, "spe", "seed", args.seed), ws))


def cmd_eval_spe(cfg, ws, args):
    _print(eval_spe_stage(_seeded(cfg, "spe", "seed", args.seed), ws))


def cmd_train_sft(cfg, ws, args):
    _print(train_sft_stage(_seeded(cfg, "sft", "seed", args.seed), ws, force=args.force))


def cmd_train_rl(cfg, ws, args):
    cfg = _seeded(cfg, "ppo", "seed", args.seed)
    if args.sft_lambda is not None:
        cfg = dataclasses.replace(cfg, ppo=dataclasses.replace(cfg.ppo, sft_lambda=args.sft_lambda))
    _print(train_rl_stage(cfg, ws, tag=args.tag, force=args.force))


def _load_infer_model(ws, args, seed):
    if args.model == "sft":
        return load_sft(ws)
    if args.model == "rl":
        return load_rl(ws, seed)
    return load_policy(Path(args.model), "train-sft", "policy checkpoint")


def cmd_infer(cfg, ws, args):
    from .infer import batch_infer
    from .spe import LearnedExtractor, RuleBasedExtractor

    cfg = _seeded(cfg, "inference", "seed", args.seed)
    icfg = cfg.inference
    if args.no_filter:
        icfg = dataclasses.replace(icfg, use_filter=False, n_candidates=1)
    elif args.n is not None:
        icfg = dataclasses.replace(icfg, use_filter=True, n_candidates=args.n)
    model, tok = _load_infer_model(ws, args, cfg.ppo.seed)
    extractor = RuleBasedExtractor()
    if args.learned_extractor or icfg.use_learned_extractor:
        emodel, etok = load_extractor(ws)
        extractor = LearnedExtractor(emodel, etok)
    src = sys.stdin if args.input in (None, "-") else open(args.input, encoding="utf-8")
    with src:
        lines = [ln.rstrip("\n") for ln in src if ln.strip()]
    results = batch_infer(model, tok, lines, icfg, extractor)
    to_stdout = args.output in (None, "-")
    out = sys.stdout if to_stdout else open(args.output, "w", encoding="utf-8")
    with contextlib.nullcontext(out) if to_stdout else out:
        for r in results:
            out.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    if any(r.error for r in results):
        log.warning("%d of %d inputs could not be resolved", sum(bool(r.error) for r in results), len(results))


def cmd_eval(cfg, ws, args):
    cfg = _seeded(cfg, "eval", "seed", args.seed)
    try:
        settings = parse_settings(args.settings)
    except ValueError as e:
        raise UserError(str(e)) from None
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    summary = eval_stage(cfg, ws, settings, seeds, generalization=args.generalization)
    for setting, rows in summary["settings"].items():
        mu = rows["MU"]
        print(f"{setting:16s} MU control_error {mu['control_error']:7.2f}  rougeL {mu['rougeL']:6.2f}")
    print(f"reports written to {ws.eval_dir}")


def cmd_plot_errors(cfg, ws, args):
    scp = parse_canonical(args.scp)
    if scp is None:
        raise UserError(f"cannot read {args.scp!r} as an SCP (e.g. 'between 75 and 125 tokens')")
    curve = error_curve(scp, range(args.min_length, args.max_length + 1))
    from .evaluation import write_error_curve_csv

    if args.output in (None, "-"):
        print("length,error")
        for n, e in curve:
            print(f"{n},{e}")
    else:
        write_error_curve_csv(args.output, curve)
        print(f"wrote {len(curve)} points to {args.output}")


# --- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lenctl", description="Length-controlled summarization toolkit.")
    p.add_argument("--version", action="version", version=f"lenctl {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration (defaults when omitted)")
    common.add_argument("--workdir", help="artifact directory (overrides $LENCTL_WORKDIR and [paths] workdir)")
    common.add_argument("--seed", type=int, help="seed for this command's stage")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth-data", cmd_synth_data, "write a synthetic corpus")
    sp.add_argument("-n", type=int, help="number of documents")
    sp = add("ingest", cmd_ingest, "import a JSONL corpus of {article, summary} records")
    sp.add_argument("path")
    add("make-templates", cmd_make_templates, "write the template corpus (bundled unless [templates] path is set)")
    add("split-templates", cmd_split_templates, "split templates into in-sample and out-sample sets")
    add("train-spe", cmd_train_spe, "train the learned SCP extractor")
    add("eval-spe", cmd_eval_spe, "case-by-case extractor accuracy on in- and out-sample templates")
    sp = add("train-sft", cmd_train_sft, "supervised training of the policy")
    sp.add_argument("--force", action="store_true", help="retrain even if a final checkpoint exists")
    sp = add("train-rl", cmd_train_rl, "PPO fine-tuning from the SFT checkpoint")
    sp.add_argument("--force", action="store_true", help="restart even if a final checkpoint exists")
    sp.add_argument("--tag", default="", help="suffix for the run directory (e.g. an ablation name)")
    sp.add_argument("--sft-lambda", type=float, help="override [ppo] sft_lambda")
    sp = add("infer", cmd_infer, "generate for utterances read from a file or stdin")
    sp.add_argument("--input", "-i", help="one utterance per line; '-' or omitted reads stdin")
    sp.add_argument("--output", "-o", help="JSONL result records; '-' or omitted writes stdout")
    sp.add_argument("--model", default="rl", help="'rl' (seed from [ppo] seed), 'sft', or a checkpoint path")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--no-filter", action="store_true", help="single sample, no filtering")
    g.add_argument("--n", type=int, help="filter over N candidates")
    sp.add_argument("--learned-extractor", action="store_true")
    sp = add("eval", cmd_eval, "control-error and ROUGE reports per setting")
    sp.add_argument("--settings", default="all", help="'all' or a comma list of Prompt,PromptRL,PromptFilter,PromptRLFilter")
    sp.add_argument("--seeds", help="comma list overriding [eval] seeds")
    sp.add_argument("--generalization", action="store_true", help="add in-sample vs out-sample rows")
    sp = add("plot-errors", cmd_plot_errors, "error-versus-length curve as CSV")
    sp.add_argument("--scp", required=True, help="canonical SCP, e.g. 'equal to 100 tokens'")
    sp.add_argument("--min-length", type=int, default=0)
    sp.add_argument("--max-length", type=int, default=300)
    sp.add_argument("--output", "-o")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config)
        ws = Workspace.resolve(cfg, args.workdir)
        args.fn(cfg, ws, args)
        return 0
    except RecordError as e:
        print(f"error: {e.path}: {len(e.errors)} bad record(s)", file=sys.stderr)
        for n, msg in e.errors:
            print(f"  line {n}: {msg}", file=sys.stderr)
        return 1
    except (UserError, ConfigError, MissingPrerequisite, RunLocked, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
