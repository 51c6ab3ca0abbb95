"""Supervised training of the policy on SCP-prefixed inputs."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .model import Batch, PolicyModel, adamw_step, generate, make_adamw, make_batch, token_logprobs
from .scp import CONSTRAINED_TYPES, StandardControlPrompt, control_error, render_scp
from .templates import AugmentedExample, Document, PromptTemplate, by_type, fill_template, sample_scp_for_reference
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)


def model_input_text(scp: StandardControlPrompt, utterance: str) -> str:
    return f"{render_scp(scp)}: {utterance}"


def _find(haystack: list[int], needle: list[int]) -> int:
    n = len(needle)
    if n == 0:
        return -1
    for i in range(len(haystack) - n + 1):
        if haystack[i : i + n] == needle:
            return i
    return -1


def encode_prompt(
    tok: Tokenizer,
    scp: StandardControlPrompt,
    utterance: str,
    max_len: int,
    article: str | None = None,
) -> list[int]:
    """``<bos> scp : utterance <sep>`` truncated to ``max_len`` without touching the SCP.

    The article's tail is dropped first when the article can be located in the
    utterance; otherwise the middle of the utterance goes.
    """
    head = [tok.bos_id] + tok.encode(render_scp(scp) + " :")
    body = tok.encode(utterance)
    budget = max_len - len(head) - 1
    if budget < 2:
        raise ValueError(f"max_len {max_len} leaves no room for the utterance")
    excess = len(body) - budget
    if excess > 0:
        start = _find(body, tok.encode(article)) if article else -1
        art_len = len(tok.encode(article)) if article else 0
        if start >= 0 and art_len > excess:
            cut = start + art_len - excess
            body = body[:cut] + body[start + art_len :]
        else:
            keep_front = budget // 2
            body = body[:keep_front] + body[len(body) - (budget - keep_front) :]
    return head + body + [tok.sep_id]


@dataclass
class SftExample:
    scp: StandardControlPrompt
    example: AugmentedExample

    @property
    def input_text(self) -> str:
        return model_input_text(self.scp, self.example.utterance)

    @property
    def target_text(self) -> str:
        return self.example.reference_summary or ""

    def prompt_ids(self, tok: Tokenizer, max_len: int) -> list[int]:
        return encode_prompt(tok, self.scp, self.example.utterance, max_len, self.example.article)

    def target_ids(self, tok: Tokenizer, max_new: int | None = None) -> list[int]:
        ids = tok.encode(self.target_text)
        if max_new is not None:
            ids = ids[: max_new - 1]
        return ids + [tok.eos_id]


def build_sft_dataset(
    corpus: Sequence[Document],
    templates: Sequence[PromptTemplate],
    rng: np.random.Generator,
    tok: Tokenizer | None = None,
) -> list[SftExample]:
    """Quarter the corpus, one constrained type per quarter, targets consistent with the reference."""
    if not corpus:
        raise ValueError("empty corpus")
    groups = by_type(templates)
    count = tok.count if tok is not None else (lambda s: len(s.split()))
    order = rng.permutation(len(corpus))
    out: list[SftExample] = []
    for ctype, part in zip(CONSTRAINED_TYPES, np.array_split(order, 4)):
        group = groups[ctype]
        for i in part:
            doc = corpus[int(i)]
            ref_len = max(1, count(doc.summary))
            scp = sample_scp_for_reference(rng, ctype, ref_len)
            tpl = group[int(rng.integers(len(group)))]
            out.append(SftExample(scp, fill_template(tpl, scp, doc.article, doc.summary)))
    perm = rng.permutation(len(out))
    return [out[int(i)] for i in perm]


def sft_batch(tok: Tokenizer, examples: Sequence[SftExample], anchor: int, max_new: int) -> Batch:
    prompts = [ex.prompt_ids(tok, anchor + 1) for ex in examples]
    targets = [ex.target_ids(tok, max_new) for ex in examples]
    return make_batch(prompts, targets, anchor, tok.pad_id)


def sft_loss(model: PolicyModel, batch: Batch) -> torch.Tensor:
    """Mean cross-entropy over continuation tokens (summary and eos)."""
    _, taken = token_logprobs(model, batch)
    mask = batch.target_mask[:, batch.prompt_len :]
    n = mask.sum()
    if n == 0:
        raise ValueError("batch has no target tokens")
    return -(taken * mask).sum() / n


@dataclass
class SftConfig:
    lr: float = 5e-5
    batch_size: int = 64
    weight_decay: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    steps: int = 200_000
    val_every: int = 1000
    val_fraction: float = 0.02
    val_generate: int = 64
    max_grad_norm: float = 1.0
    max_new_tokens: int = 200
    temperature: float = 0.8
    top_k: int = 50
    seed: int = 0


@dataclass
class SftResult:
    model: PolicyModel
    history: list[dict] = field(default_factory=list)
    best_step: int = 0


def validate_policy(
    model: PolicyModel,
    tok: Tokenizer,
    examples: Sequence[SftExample],
    *,
    max_new_tokens: int,
    temperature: float,
    top_k: int,
    seed: int,
) -> dict:
    """Sampled control error and ROUGE F1 on labelled examples."""
    from .evaluation import rouge_scores

    if not examples:
        return {"control_error": float("nan"), "rouge1": float("nan"), "rouge2": float("nan"), "rougeL": float("nan")}
    prompts = [ex.prompt_ids(tok, model.cfg.anchor + 1) for ex in examples]
    rngs = [np.random.default_rng([seed, i]) for i in range(len(examples))]
    gens = []
    for s in range(0, len(prompts), 128):
        gens += generate(
            model, prompts[s : s + 128], max_new_tokens=max_new_tokens, eos_id=tok.eos_id,
            pad_id=tok.pad_id, temperature=temperature, top_k=top_k, rngs=rngs[s : s + 128],
        )
    errs, r1, r2, rl = [], [], [], []
    for ex, g in zip(examples, gens):
        errs.append(control_error(ex.scp, g.length))
        s = rouge_scores(g.tokens[: g.length], tok.encode(ex.target_text))
        r1.append(s["rouge1"])
        r2.append(s["rouge2"])
        rl.append(s["rougeL"])
    return {
        "control_error": float(np.mean(errs)),
        "rouge1": float(np.mean(r1)),
        "rouge2": float(np.mean(r2)),
        "rougeL": float(np.mean(rl)),
    }


def train_sft(
    model: PolicyModel,
    tok: Tokenizer,
    train: Sequence[SftExample],
    val: Sequence[SftExample],
    cfg: SftConfig,
    on_validate: Callable[[dict], None] | None = None,
    start_step: int = 0,
) -> SftResult:
    """Minimise masked next-token cross-entropy; keep the lowest-validation-loss weights."""
    if not train:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = make_adamw(model.parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    anchor = model.cfg.anchor
    best = (float("inf"), copy.deepcopy(model.state_dict()), start_step)
    history: list[dict] = []
    order = rng.permutation(len(train))
    cursor = 0
    t0 = time.time()
    running = None
    for step in range(start_step + 1, cfg.steps + 1):
        if cursor + cfg.batch_size > len(order):
            order, cursor = rng.permutation(len(train)), 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        model.train()
        loss = sft_loss(model, sft_batch(tok, [train[int(i)] for i in idx], anchor, cfg.max_new_tokens))
        loss.backward()
        adamw_step(opt, model, cfg.max_grad_norm)
        running = loss.item() if running is None else 0.95 * running + 0.05 * loss.item()
        if step % cfg.val_every == 0 or step == cfg.steps:
            model.eval()
            with torch.no_grad():
                vl = []
                for s in range(0, len(val), 64):
                    vl.append(sft_loss(model, sft_batch(tok, val[s : s + 64], anchor, cfg.max_new_tokens)).item())
                val_loss = float(np.mean(vl)) if vl else float("nan")
            metrics = validate_policy(
                model, tok, val[: cfg.val_generate], max_new_tokens=cfg.max_new_tokens,
                temperature=cfg.temperature, top_k=cfg.top_k, seed=cfg.seed,
            )
            rec = {"step": step, "loss": val_loss, "train_loss": running, **metrics, "elapsed": time.time() - t0}
            history.append(rec)
            log.info("sft step %d val_loss %.4f err %.2f rougeL %.2f", step, val_loss, metrics["control_error"], metrics["rougeL"])
            if on_validate:
                on_validate(rec)
            if val_loss < best[0]:
                best = (val_loss, copy.deepcopy(model.state_dict()), step)
    model.load_state_dict(best[1])
    model.eval()
    return SftResult(model, history, best[2])
