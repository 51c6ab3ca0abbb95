"""Artifact layout and the pipeline stages behind the command line.

A workspace directory holds every artifact::

    data/corpus.jsonl          documents (article, summary)
    templates/templates.jsonl  template corpus
    templates/split.json       in-sample / out-sample template ids
    tokenizer.json
    spe/  sft/  rl/seed<N>[-tag]/  eval/   stage run directories

Each stage directory doubles as its run directory: it receives a config
snapshot, the seed, the version string and an append-only log, and is
guarded by a lock file while the stage runs.
"""
from __future__ import annotations

import contextlib
import copy
import dataclasses
import datetime as _dt
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import RunConfig
from .evaluation import (
    EvalReport,
    SETTINGS,
    baseline_reference_error,
    build_eval_set,
    control_error_suite,
    generalization_eval,
    write_reports_csv,
    write_reports_json,
)
from .infer import InferenceConfig
from .io import append_jsonl, read_jsonl, write_jsonl
from .model import ModelConfig, PolicyModel
from .ppo import RLProgress, init_critic, rl_stream, train_rl
from .scp import CONSTRAINED_TYPES
from .sft import SftExample, build_sft_dataset, train_sft
from .spe import LearnedExtractor, RuleBasedExtractor, eval_extractor, new_extractor, train_extractor
from .templates import (
    Document,
    PromptTemplate,
    bundled_templates,
    build_spe_dataset,
    gen_synthetic_corpus,
    split_templates,
)
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

WORKDIR_ENV = "LENCTL_WORKDIR"


class MissingPrerequisite(RuntimeError):
    def __init__(self, what: str, command: str):
        self.command = command
        super().__init__(f"{what} not found; run `lenctl {command}` first")


class RunLocked(RuntimeError):
    pass


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class Workspace:
    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)

    @classmethod
    def resolve(cls, cfg: RunConfig, override: str | None = None) -> Workspace:
        root = override or os.environ.get(WORKDIR_ENV) or cfg.paths.workdir
        return cls(Path(root))

    @property
    def corpus(self) -> Path:
        return self.root / "data" / "corpus.jsonl"

    @property
    def templates(self) -> Path:
        return self.root / "templates" / "templates.jsonl"

    @property
    def split(self) -> Path:
        return self.root / "templates" / "split.json"

    @property
    def tokenizer(self) -> Path:
        return self.root / "tokenizer.json"

    @property
    def spe_dir(self) -> Path:
        return self.root / "spe"

    @property
    def sft_dir(self) -> Path:
        return self.root / "sft"

    def rl_dir(self, seed: int, tag: str = "") -> Path:
        return self.root / "rl" / (f"seed{seed}-{tag}" if tag else f"seed{seed}")

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval"


@contextlib.contextmanager
def run_dir(path: Path, cfg: RunConfig, seed: int, command: str) -> Iterator[Path]:
    """Lock ``path`` for one writer and record config, seed and version."""
    path.mkdir(parents=True, exist_ok=True)
    lock = path / "lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{path} is locked by another process (remove {lock} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        (path / "config.ini").write_text(cfg.to_ini())
        (path / "seed").write_text(f"{seed}\n")
        (path / "version").write_text(version_string() + "\n")
        append_jsonl(path / "runs.jsonl", {
            "command": command,
            "seed": seed,
            "version": version_string(),
            "argv": sys.argv[1:],
            "started": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        })
        yield path
    finally:
        os.close(fd)
        lock.unlink(missing_ok=True)


def _stage_logger(path: Path):
    def emit(rec: dict) -> None:
        append_jsonl(path / "log.jsonl", rec)

    return emit


# --- data -------------------------------------------------------------------------------


def write_synthetic_corpus(cfg: RunConfig, ws: Workspace) -> int:
    return write_jsonl(ws.corpus, (d.to_dict() for d in gen_synthetic_corpus(cfg.corpus)))


def ingest_corpus(ws: Workspace, source: str | Path) -> int:
    docs = read_jsonl(source, Document.from_dict)
    if not docs:
        raise ValueError(f"{source}: no documents")
    return write_jsonl(ws.corpus, (d.to_dict() for d in docs))


def load_corpus(ws: Workspace) -> list[Document]:
    if not ws.corpus.exists():
        raise MissingPrerequisite(f"corpus {ws.corpus}", "synth-data")
    return read_jsonl(ws.corpus, Document.from_dict)


def corpus_splits(cfg: RunConfig, docs: Sequence[Document]) -> tuple[list[Document], list[Document], list[Document]]:
    """(train, validation, test) with the last ``n_docs`` as test and ``n_val_docs`` before them."""
    n_test, n_val = cfg.eval.n_docs, cfg.eval.n_val_docs
    if len(docs) <= n_test + n_val:
        raise ValueError(f"corpus of {len(docs)} documents is too small for {n_test} test and {n_val} validation")
    cut = len(docs) - n_test - n_val
    return list(docs[:cut]), list(docs[cut : cut + n_val]), list(docs[cut + n_val :])


def write_templates(cfg: RunConfig, ws: Workspace) -> int:
    if cfg.templates.path:
        tpls = read_jsonl(cfg.templates.path, PromptTemplate.from_dict)
    else:
        tpls = bundled_templates()
    return write_jsonl(ws.templates, (t.to_dict() for t in tpls))


def load_templates(ws: Workspace) -> list[PromptTemplate]:
    if not ws.templates.exists():
        raise MissingPrerequisite(f"templates {ws.templates}", "make-templates")
    return read_jsonl(ws.templates, PromptTemplate.from_dict)


def write_split(cfg: RunConfig, ws: Workspace) -> tuple[int, int]:
    tpls = load_templates(ws)
    rng = np.random.default_rng(cfg.templates.split_seed)
    ins, outs = split_templates(tpls, rng, cfg.templates.holdout_fraction)
    ws.split.write_text(json.dumps({
        "seed": cfg.templates.split_seed,
        "holdout_fraction": cfg.templates.holdout_fraction,
        "in_sample": [t.id for t in ins],
        "out_sample": [t.id for t in outs],
    }, indent=2))
    return len(ins), len(outs)


def load_split(ws: Workspace) -> tuple[list[PromptTemplate], list[PromptTemplate]]:
    if not ws.split.exists():
        raise MissingPrerequisite(f"template split {ws.split}", "split-templates")
    data = json.loads(ws.split.read_text())
    by_id = {t.id: t for t in load_templates(ws)}
    return [by_id[i] for i in data["in_sample"]], [by_id[i] for i in data["out_sample"]]


def load_tokenizer(ws: Workspace) -> Tokenizer:
    """The workspace tokenizer, built from corpus and templates on first use."""
    if ws.tokenizer.exists():
        return Tokenizer.from_dict(json.loads(ws.tokenizer.read_text()))
    docs = load_corpus(ws)
    tok = Tokenizer.build(
        (t for d in docs for t in (d.article, d.summary)), templates=load_templates(ws), max_number=512
    )
    ws.tokenizer.write_text(json.dumps(tok.to_dict()))
    return tok


# --- extractor --------------------------------------------------------------------------


def spe_data(cfg: RunConfig, ws: Workspace):
    train_docs, _, _ = corpus_splits(cfg, load_corpus(ws))
    ins, outs = load_split(ws)
    rng = np.random.default_rng(cfg.spe.seed)
    s = cfg.spe
    train = build_spe_dataset(train_docs, ins, rng, s.n_train, s.p_none)
    val = build_spe_dataset(train_docs, ins, rng, s.n_val, s.p_none)
    held = build_spe_dataset(train_docs, outs, rng, s.n_val, s.p_none)
    return train, val, held


def train_spe_stage(cfg: RunConfig, ws: Workspace) -> dict:
    tok = load_tokenizer(ws)
    train, val, held = spe_data(cfg, ws)
    with run_dir(ws.spe_dir, cfg, cfg.spe.seed, "train-spe") as d:
        torch.manual_seed(cfg.spe.seed)
        t0 = time.time()
        res = train_extractor(new_extractor(tok, cfg.spe), tok, train, val, on_validate=_stage_logger(d))
        metrics = {
            "in_sample": eval_extractor(res.model, tok, val),
            "out_sample": eval_extractor(res.model, tok, held),
            "train_seconds": time.time() - t0,
        }
        save_checkpoint(res.model, d / "extractor.ckpt", {"tok": tok.to_dict()})
        (d / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return metrics


def load_extractor(ws: Workspace):
    path = ws.spe_dir / "extractor.ckpt"
    if not path.exists():
        raise MissingPrerequisite("extractor checkpoint", "train-spe")
    model, extra = load_checkpoint(path)
    return model, Tokenizer.from_dict(extra["tok"])


def eval_spe_stage(cfg: RunConfig, ws: Workspace) -> dict:
    model, tok = load_extractor(ws)
    _, val, held = spe_data(cfg, ws)
    return {"in_sample": eval_extractor(model, tok, val), "out_sample": eval_extractor(model, tok, held)}


# --- policy -----------------------------------------------------------------------------


def model_config(cfg: RunConfig, tok: Tokenizer) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        vocab_size=tok.vocab_size, n_layers=m.n_layers, n_heads=m.n_heads, d_model=m.d_model,
        max_context=m.max_context, anchor=m.anchor, seed=m.seed, number_values=tok.number_values(),
    )


def sft_examples(cfg: RunConfig, ws: Workspace, tok: Tokenizer) -> tuple[list[SftExample], list[SftExample]]:
    train_docs, _, _ = corpus_splits(cfg, load_corpus(ws))
    ins, _ = load_split(ws)
    data = build_sft_dataset(train_docs, ins, np.random.default_rng(cfg.sft.seed), tok)
    n_val = max(1, int(round(cfg.sft.val_fraction * len(data))))
    return data[n_val:], data[:n_val]


def train_sft_stage(cfg: RunConfig, ws: Workspace, force: bool = False) -> dict:
    """Train (or continue training) the SFT policy; a finished run is left alone unless ``force``."""
    tok = load_tokenizer(ws)
    d = ws.sft_dir
    final, last = d / "policy.ckpt", d / "last.ckpt"
    if final.exists() and not force:
        return {"status": "complete", "checkpoint": str(final)}
    train, val = sft_examples(cfg, ws, tok)
    with run_dir(d, cfg, cfg.sft.seed, "train-sft"):
        if force:
            last.unlink(missing_ok=True)
            (d / "log.jsonl").unlink(missing_ok=True)
        torch.manual_seed(cfg.sft.seed)
        model = PolicyModel(model_config(cfg, tok))
        start = 0
        if last.exists():
            extra = load_into(model, last)
            start = int(extra["step"])
            log.info("resuming SFT from step %d", start)
        emit = _stage_logger(d)

        def on_validate(rec: dict) -> None:
            emit(rec)
            save_checkpoint(model, last, {"tok": tok.to_dict(), "step": rec["step"]})

        res = train_sft(model, tok, train, val, cfg.sft, on_validate=on_validate, start_step=start)
        save_checkpoint(res.model, final, {"tok": tok.to_dict(), "best_step": res.best_step})
    return {"status": "trained", "checkpoint": str(final), "best_step": res.best_step}


def load_policy(path: Path, producer: str, what: str) -> tuple[PolicyModel, Tokenizer]:
    if not path.exists():
        raise MissingPrerequisite(f"{what} ({path})", producer)
    model, extra = load_checkpoint(path)
    return model.eval(), Tokenizer.from_dict(extra["tok"])


def load_sft(ws: Workspace) -> tuple[PolicyModel, Tokenizer]:
    return load_policy(ws.sft_dir / "policy.ckpt", "train-sft", "SFT checkpoint")


def load_rl(ws: Workspace, seed: int, tag: str = "") -> tuple[PolicyModel, Tokenizer]:
    return load_policy(ws.rl_dir(seed, tag) / "policy.ckpt", "train-rl", f"RL checkpoint for seed {seed}")


def validation_items(cfg: RunConfig, ws: Workspace):
    _, val_docs, _ = corpus_splits(cfg, load_corpus(ws))
    ins, _ = load_split(ws)
    return build_eval_set(val_docs, ins, cfg.eval.seed + 1)


def policy_validator(cfg: RunConfig, ws: Workspace, tok: Tokenizer):
    items = validation_items(cfg, ws)
    icfg = dataclasses.replace(cfg.inference, n_candidates=1, use_filter=False, sampling="independent")

    def validate(model: PolicyModel) -> dict:
        row = control_error_suite(model, tok, items, icfg).mu()
        return {k: row[k] for k in ("control_error", "rouge1", "rouge2", "rougeL")}

    return validate


def rl_extractor(cfg: RunConfig, ws: Workspace):
    if cfg.inference.use_learned_extractor:
        model, etok = load_extractor(ws)
        return LearnedExtractor(model, etok)
    return RuleBasedExtractor()


def train_rl_stage(cfg: RunConfig, ws: Workspace, tag: str = "", force: bool = False) -> dict:
    """PPO from the SFT checkpoint; resumable from the last validation."""
    seed = cfg.ppo.seed
    d = ws.rl_dir(seed, tag)
    final = d / "policy.ckpt"
    if final.exists() and not force:
        return {"status": "complete", "checkpoint": str(final)}
    actor, tok = load_sft(ws)
    train_docs, _, _ = corpus_splits(cfg, load_corpus(ws))
    ins, _ = load_split(ws)
    extractor = rl_extractor(cfg, ws)
    validator = policy_validator(cfg, ws, tok)
    with run_dir(d, cfg, seed, "train-rl"):
        state, cur_a, cur_c, best_p = d / "progress.json", d / "actor.ckpt", d / "critic.ckpt", d / "best.ckpt"
        if force:
            for p in (state, cur_a, cur_c, best_p, d / "log.jsonl"):
                p.unlink(missing_ok=True)
        critic = init_critic(actor) if cfg.ppo.mode == "ActorCritic" else None
        resume = None
        if state.exists():
            prog = RLProgress(**json.loads(state.read_text()))
            load_into(actor, cur_a)
            if critic is not None:
                load_into(critic, cur_c)
            best_model = copy.deepcopy(actor)
            load_into(best_model, best_p)
            resume = (prog, best_model.state_dict())
            log.info("resuming RL after buffer %d", prog.iteration)
        start = resume[0].iteration if resume else 0
        stream = rl_stream(train_docs, ins, np.random.default_rng([seed, 7, start]), tok)

        def on_checkpoint(prog: RLProgress, a, c, best_state) -> None:
            save_checkpoint(a, cur_a, {"tok": tok.to_dict()})
            if c is not None:
                save_checkpoint(c, cur_c)
            b = copy.deepcopy(a)
            b.load_state_dict(best_state)
            save_checkpoint(b, best_p, {"tok": tok.to_dict()})
            state.write_text(json.dumps(dataclasses.asdict(prog)))

        res = train_rl(actor, critic, cfg.ppo, stream, extractor, tok, validator,
                       on_log=_stage_logger(d), resume=resume, on_checkpoint=on_checkpoint)
        save_checkpoint(res.actor, final, {"tok": tok.to_dict(), "best": res.best})
        summary = {"baseline": res.baseline, "best": res.best, "stopped_early": res.stopped_early,
                   "skipped": res.skipped}
        (d / "summary.json").write_text(json.dumps(summary, indent=2))
    return {"status": "trained", "checkpoint": str(final), **summary}


# --- evaluation -------------------------------------------------------------------------


def eval_items(cfg: RunConfig, ws: Workspace, which: str = "in"):
    _, _, test_docs = corpus_splits(cfg, load_corpus(ws))
    ins, outs = load_split(ws)
    return build_eval_set(test_docs, ins if which == "in" else outs, cfg.eval.seed)


def parse_settings(spec: str) -> list[str]:
    if spec == "all":
        return list(SETTINGS)
    out = [s.strip() for s in spec.split(",") if s.strip()]
    bad = [s for s in out if s not in SETTINGS]
    if bad:
        raise ValueError(f"unknown setting(s) {bad}; choose from {', '.join(SETTINGS)} or 'all'")
    return out


def _setting_cfg(cfg: RunConfig, setting: str, seed: int) -> InferenceConfig:
    filt = setting.endswith("Filter")
    return dataclasses.replace(
        cfg.inference, seed=seed, use_filter=filt, n_candidates=cfg.eval.n_candidates if filt else 1,
        sampling="independent",
    )


def evaluate_settings(cfg: RunConfig, ws: Workspace, settings: Sequence[str], seeds: Sequence[int],
                      rl_tag: str = "", which: str = "in") -> dict[int, list[EvalReport]]:
    """Per seed, one report per setting on the test documents."""
    items = eval_items(cfg, ws, which)
    sft, tok = load_sft(ws)
    out: dict[int, list[EvalReport]] = {}
    for seed in seeds:
        rl = load_rl(ws, seed, rl_tag)[0] if any("RL" in s for s in settings) else None
        reps = []
        for s in settings:
            model = rl if "RL" in s else sft
            reps.append(control_error_suite(model, tok, items, _setting_cfg(cfg, s, seed), s))
        out[seed] = reps
    return out


def seed_average(per_seed: dict[int, list[EvalReport]]) -> dict[str, dict[str, dict]]:
    """Setting -> row -> metric averaged over seeds."""
    acc: dict[str, dict[str, list[dict]]] = {}
    for reps in per_seed.values():
        for r in reps:
            for name, row in r.rows().items():
                acc.setdefault(r.setting, {}).setdefault(name, []).append(row)
    return {
        s: {name: {k: float(np.mean([r[k] for r in rows])) for k in rows[0]} for name, rows in table.items()}
        for s, table in acc.items()
    }


def eval_stage(cfg: RunConfig, ws: Workspace, settings: Sequence[str], seeds: Sequence[int] | None = None,
               generalization: bool = False) -> dict:
    seeds = list(seeds) if seeds is not None else cfg.eval.seed_list()
    with run_dir(ws.eval_dir, cfg, cfg.eval.seed, "eval") as d:
        per_seed = evaluate_settings(cfg, ws, settings, seeds)
        for seed, reps in per_seed.items():
            write_reports_json(d / f"report_seed{seed}.json", reps, {"seed": seed})
            write_reports_csv(d / f"report_seed{seed}.csv", reps)
        _, _, test_docs = corpus_splits(cfg, load_corpus(ws))
        tok = load_tokenizer(ws)
        baseline = baseline_reference_error(
            [tok.count(doc.summary) for doc in test_docs], np.random.default_rng(cfg.eval.seed)
        )
        summary = {"seeds": seeds, "settings": seed_average(per_seed), "reference_baseline": baseline}
        if generalization:
            summary["generalization"] = generalization_rows(cfg, ws, seeds)
        (d / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def generalization_rows(cfg: RunConfig, ws: Workspace, seeds: Sequence[int], rl_tag: str = "") -> dict:
    """Seed-averaged In-sample / Out-sample MU rows for the RL policies (N=1)."""
    _, _, test_docs = corpus_splits(cfg, load_corpus(ws))
    ins, outs = load_split(ws)
    rows: dict[str, list[dict]] = {}
    for seed in seeds:
        model, tok = load_rl(ws, seed, rl_tag)
        icfg = _setting_cfg(cfg, "PromptRL", seed)
        res = generalization_eval(model, tok, test_docs, ins, outs, {t.id for t in ins}, icfg, cfg.eval.seed)
        for name, rep in res.items():
            rows.setdefault(name, []).append(rep.mu())
    return {k: {m: float(np.mean([r[m] for r in v])) for m in v[0]} for k, v in rows.items()}


def per_type_errors(report: EvalReport) -> dict[str, float]:
    return {t.abbrev: report.per_type[t]["control_error"] for t in CONSTRAINED_TYPES if t in report.per_type}
