"""Inference with best-of-N sample filtering under the rule-based reward."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import Generation, PolicyModel, beam_search, generate
from .ppo import Extractor
from .scp import StandardControlPrompt, compute_reward
from .sft import encode_prompt
from .spe import AmbiguousInstruction, ParseResult, RuleBasedExtractor
from .tokenizer import Tokenizer


@dataclass
class InferenceConfig:
    n_candidates: int = 8
    temperature: float = 0.8
    top_k: int = 50
    use_filter: bool = True
    use_learned_extractor: bool = False
    sampling: str = "independent"
    max_new_tokens: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        if self.sampling not in ("independent", "beam"):
            raise ValueError("sampling must be independent or beam")


@dataclass
class Candidate:
    text: str
    tokens: list[int]
    length: int
    reward: float
    mean_logprob: float


@dataclass
class InferenceResult:
    input: str
    scp: StandardControlPrompt | None
    output: str | None
    reward: float | None
    selected_index: int | None
    candidates: list[Candidate] = field(default_factory=list)
    error: str | None = None
    alternatives: list[StandardControlPrompt] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "input": self.input,
            "scp": self.scp.to_dict() if self.scp is not None else None,
            "output": self.output,
            "reward": self.reward,
            "n_candidates": len(self.candidates),
            "selected_index": self.selected_index,
        }
        if self.error is not None:
            d["error"] = self.error
            d["alternatives"] = [s.to_dict() for s in self.alternatives]
        return d


def select_candidate(rewards: Sequence[float], mean_logprobs: Sequence[float]) -> int:
    """Highest reward, then highest mean log-probability, then lowest index."""
    if not rewards:
        raise ValueError("no candidates")
    return min(range(len(rewards)), key=lambda i: (-rewards[i], -mean_logprobs[i], i))


def example_seed(master_seed: int, utterance: str) -> int:
    h = hashlib.sha256(f"{master_seed}\x00{utterance}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def _candidates(
    model: PolicyModel, tok: Tokenizer, prompts: list[list[int]], cfg: InferenceConfig, seeds: list[int]
) -> list[list[Generation]]:
    """N candidates per prompt; row j of prompt i draws from ``rng([seed_i, j])``."""
    n = cfg.n_candidates
    if cfg.sampling == "beam":
        return [
            beam_search(model, p, beam_width=max(n, 2), n_best=n, max_new_tokens=cfg.max_new_tokens,
                        eos_id=tok.eos_id, pad_id=tok.pad_id)
            for p in prompts
        ]
    flat_prompts = [p for p in prompts for _ in range(n)]
    rngs = [np.random.default_rng([s, j]) for s in seeds for j in range(n)]
    gens: list[Generation] = []
    step = 128
    for s in range(0, len(flat_prompts), step):
        gens += generate(
            model, flat_prompts[s : s + step], max_new_tokens=cfg.max_new_tokens, eos_id=tok.eos_id,
            pad_id=tok.pad_id, temperature=cfg.temperature, top_k=cfg.top_k, rngs=rngs[s : s + step],
        )
    return [gens[i * n : (i + 1) * n] for i in range(len(prompts))]


def generate_for_scps(
    model: PolicyModel,
    tok: Tokenizer,
    items: Sequence[tuple[str, StandardControlPrompt, str | None]],
    cfg: InferenceConfig,
    seeds: Sequence[int],
) -> list[InferenceResult]:
    """Sample and filter for already-resolved ``(utterance, scp, article)`` triples."""
    prompts = [encode_prompt(tok, scp, u, model.cfg.anchor + 1, art) for u, scp, art in items]
    cands = _candidates(model, tok, prompts, cfg, list(seeds))
    out = []
    for (u, scp, _), gens in zip(items, cands):
        cs = []
        for g in gens:
            toks = g.tokens[: g.length]
            cs.append(Candidate(tok.decode(toks), toks, g.length, compute_reward(scp, g.length).reward, g.mean_logprob))
        k = select_candidate([c.reward for c in cs], [c.mean_logprob for c in cs]) if cfg.use_filter else 0
        out.append(InferenceResult(u, scp, cs[k].text, cs[k].reward, k, cs))
    return out


def _resolve(extractor: Extractor, utterances: Sequence[str]):
    return extractor(list(utterances))


def batch_infer(
    model: PolicyModel,
    tok: Tokenizer,
    inputs: Sequence[str],
    cfg: InferenceConfig,
    extractor: Extractor | None = None,
) -> list[InferenceResult]:
    """Order-preserving inference; an item whose instruction cannot be resolved reports an error."""
    if not inputs:
        return []
    extractor = extractor or RuleBasedExtractor()
    parsed = _resolve(extractor, inputs)
    results: list[InferenceResult | None] = [None] * len(inputs)
    todo = []
    for i, (u, p) in enumerate(zip(inputs, parsed)):
        if not u.strip():
            results[i] = InferenceResult(u, None, None, None, None, error="empty input")
        elif isinstance(p, AmbiguousInstruction):
            results[i] = InferenceResult(u, None, None, None, None, error=str(p), alternatives=p.candidates)
        elif not isinstance(p, ParseResult):
            results[i] = InferenceResult(u, None, None, None, None, error="no instruction could be extracted")
        else:
            todo.append((i, u, p.scp))
    if todo:
        done = generate_for_scps(
            model, tok, [(u, scp, None) for _, u, scp in todo], cfg,
            [example_seed(cfg.seed, u) for _, u, _ in todo],
        )
        for (i, _, _), r in zip(todo, done):
            results[i] = r
    return results  # type: ignore[return-value]


def infer(
    model: PolicyModel,
    tok: Tokenizer,
    utterance: str,
    cfg: InferenceConfig,
    extractor: Extractor | None = None,
) -> InferenceResult:
    return batch_infer(model, tok, [utterance], cfg, extractor)[0]
