"""Tiny decoder-only transformer, critic, optimizer helpers and sampling.

Gradients come from torch autograd.  Sequences are laid out left-padded so the
separator that ends every prompt sits at position ``anchor``; the n-th generated
token therefore always has position ``anchor + n``.  Number tokens and positions
share a sinusoidal feature basis, which lets a small model compare "tokens
generated so far" with a requested length.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

_PERIODS = (3.0, 5.0, 8.0, 13.0, 21.0, 34.0, 55.0, 89.0, 144.0, 233.0)
N_NUMERIC = 2 + 2 * len(_PERIODS)


def numeric_features(values: torch.Tensor) -> torch.Tensor:
    """[v/128, 1, sin/cos(2*pi*v/p) ...] for each value."""
    v = values.to(torch.float32).unsqueeze(-1)
    ang = 2 * math.pi * v / torch.tensor(_PERIODS)
    return torch.cat([v / 128.0, torch.ones_like(v), torch.sin(ang), torch.cos(ang)], dim=-1)


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    max_context: int = 512
    anchor: int = 127
    causal: bool = True
    seed: int = 0
    number_values: list[int] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


class ContextOverflow(ValueError):
    pass


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc = nn.Linear(d, 4 * d)
        self.out = nn.Linear(4 * d, d)

    def forward(self, x, mask, cache=None):
        B, T, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(D, dim=-1)
        q = q.view(B, T, h, D // h).transpose(1, 2)
        k = k.view(B, T, h, D // h).transpose(1, 2)
        v = v.view(B, T, h, D // h).transpose(1, 2)
        if cache is not None:
            k = torch.cat([cache[0], k], dim=2)
            v = torch.cat([cache[1], v], dim=2)
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        y = y.transpose(1, 2).reshape(B, T, D)
        x = x + self.proj(y)
        x = x + self.out(F.gelu(self.fc(self.ln2(x))))
        return x, (k, v)


class Transformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.d_model % cfg.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.cfg = cfg
        d = cfg.d_model
        self.tok = nn.Embedding(cfg.vocab_size, d)
        self.pos = nn.Embedding(cfg.max_context, d)
        self.num_proj = nn.Linear(N_NUMERIC, d, bias=False)
        self.pos_proj = nn.Linear(N_NUMERIC, d, bias=False)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)

        values = list(cfg.number_values) or [-1] * cfg.vocab_size
        if len(values) != cfg.vocab_size:
            raise ValueError("number_values must have one entry per vocabulary id")
        vals = torch.tensor(values)
        feats = numeric_features(vals.clamp(min=0)) * (vals >= 0).unsqueeze(-1)
        self.register_buffer("num_feats", feats, persistent=False)
        offsets = torch.arange(cfg.max_context) - cfg.anchor
        self.register_buffer("pos_feats", numeric_features(offsets), persistent=False)
        self.reset_parameters(cfg.seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif ".ln" in name or name.startswith("ln"):
                nn.init.ones_(p)
            else:
                with torch.no_grad():
                    p.normal_(0.0, 0.02, generator=g)
        with torch.no_grad():
            # residual projections scaled down with depth
            for b in self.blocks:
                b.proj.weight.mul_(1 / math.sqrt(2 * self.cfg.n_layers))
                b.out.weight.mul_(1 / math.sqrt(2 * self.cfg.n_layers))

    def embed(self, ids: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        return (
            self.tok(ids)
            + self.num_proj(self.num_feats[ids])
            + self.pos(pos)
            + self.pos_proj(self.pos_feats[pos])
        )

    def forward(self, ids, pad_mask=None, pos_offset: int = 0, cache=None):
        """Hidden states for ``ids`` (B, T).

        ``pad_mask`` (B, T_past + T) is True on real tokens.  ``cache`` is the
        per-layer key/value list returned by a previous call.
        """
        B, T = ids.shape
        past = 0 if cache is None else cache[0][0].shape[2]
        start = pos_offset + past
        if start < 0 or start + T > self.cfg.max_context:
            raise ContextOverflow(
                f"positions {start}..{start + T - 1} outside context of {self.cfg.max_context}"
            )
        pos = torch.arange(start, start + T)
        x = self.embed(ids, pos)
        total = past + T
        if pad_mask is None:
            keys = torch.ones(B, total, dtype=torch.bool)
        else:
            keys = pad_mask
        mask = keys[:, None, None, :].expand(B, 1, T, total)
        if self.cfg.causal:
            q_idx = torch.arange(past, total)[:, None]
            k_idx = torch.arange(total)[None, :]
            mask = mask & (k_idx <= q_idx)
        # a fully padded query row would otherwise have no key at all
        diag = torch.zeros(T, total, dtype=torch.bool)
        diag[torch.arange(T), torch.arange(past, total)] = True
        mask = mask | diag
        new_cache = []
        for i, blk in enumerate(self.blocks):
            x, kv = blk(x, mask, None if cache is None else cache[i])
            new_cache.append(kv)
        return self.ln_f(x), new_cache


class PolicyModel(nn.Module):
    """Autoregressive LM with the output projection tied to the token embedding."""

    kind = "policy"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.body = Transformer(cfg)

    def forward(self, ids, pad_mask=None, pos_offset: int = 0, cache=None):
        h, cache = self.body(ids, pad_mask, pos_offset, cache)
        return h @ self.body.tok.weight.T, cache


class CriticModel(nn.Module):
    """Scalar regressor read off the final real position of each row."""

    kind = "critic"

    def __init__(self, cfg: ModelConfig, scale: float = 10.0):
        super().__init__()
        self.cfg = cfg
        self.scale = scale
        self.body = Transformer(cfg)
        self.head = nn.Linear(cfg.d_model, 1)
        with torch.no_grad():
            self.head.weight.normal_(0.0, 0.02, generator=torch.Generator().manual_seed(cfg.seed + 1))
            self.head.bias.zero_()

    def checkpoint_config(self) -> dict:
        return {"critic": {"scale": self.scale}}

    def forward(self, ids, pad_mask=None, pos_offset: int = 0):
        h, _ = self.body(ids, pad_mask, pos_offset)
        if pad_mask is None:
            last = torch.full((ids.shape[0],), ids.shape[1] - 1)
        else:
            idx = torch.arange(ids.shape[1]).expand_as(pad_mask)
            last = torch.where(pad_mask, idx, -1).max(dim=1).values
        h_last = h[torch.arange(ids.shape[0]), last]
        return self.scale * self.head(h_last).squeeze(-1)


def forward_logits(model: PolicyModel, token_ids: Sequence[int]) -> torch.Tensor:
    """Per-position logits (T, V) for a single unpadded sequence starting at position 0."""
    ids = torch.as_tensor(list(token_ids), dtype=torch.long)[None]
    logits, _ = model(ids)
    return logits[0]


# --- batching ----------------------------------------------------------------


@dataclass
class Batch:
    """Left-padded prompts followed by right-padded continuations.

    ``prompt_len`` columns hold prompts (ending at position ``anchor``); the
    remaining columns hold continuation tokens.  ``target_mask`` marks
    continuation tokens (the ones predicted from the previous column).
    """

    ids: torch.Tensor
    pad_mask: torch.Tensor
    target_mask: torch.Tensor
    pos_offset: int
    prompt_len: int

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def make_batch(
    prompts: Sequence[Sequence[int]],
    continuations: Sequence[Sequence[int]],
    anchor: int,
    pad_id: int,
) -> Batch:
    B = len(prompts)
    Lp = max(len(p) for p in prompts)
    Lc = max((len(c) for c in continuations), default=0)
    if Lp > anchor + 1:
        raise ContextOverflow(f"prompt of {Lp} tokens exceeds anchor slot {anchor + 1}")
    ids = torch.full((B, Lp + Lc), pad_id, dtype=torch.long)
    pad = torch.zeros(B, Lp + Lc, dtype=torch.bool)
    tgt = torch.zeros(B, Lp + Lc, dtype=torch.bool)
    for i, (p, c) in enumerate(zip(prompts, continuations)):
        ids[i, Lp - len(p) : Lp] = torch.as_tensor(list(p), dtype=torch.long)
        pad[i, Lp - len(p) : Lp] = True
        if len(c):
            ids[i, Lp : Lp + len(c)] = torch.as_tensor(list(c), dtype=torch.long)
            pad[i, Lp : Lp + len(c)] = True
            tgt[i, Lp : Lp + len(c)] = True
    return Batch(ids, pad, tgt, anchor - Lp + 1, Lp)


def token_logprobs(model: PolicyModel, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Log-softmax over the vocabulary at every position that predicts a target.

    Returns ``(logp, taken)``: ``logp`` is (B, Lc, V) for the continuation
    columns and ``taken`` (B, Lc) the log-probability of each actual token.
    """
    logits, _ = model(batch.ids, batch.pad_mask, batch.pos_offset)
    Lp = batch.prompt_len
    logp = F.log_softmax(logits[:, Lp - 1 : -1], dim=-1)
    targets = batch.ids[:, Lp:]
    taken = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return logp, taken


# --- optimisation -------------------------------------------------------------


class NonFiniteGradient(FloatingPointError):
    pass


def make_adamw(
    params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0
) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)


def adamw_step(opt: torch.optim.Optimizer, model: nn.Module, max_grad_norm: float | None = None) -> None:
    """Check gradients, optionally clip, step, and clear gradients."""
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
    if max_grad_norm:
        torch.nn.utils.clip_grad_norm_(model.parameters(), max_grad_norm)
    opt.step()
    opt.zero_grad(set_to_none=True)


def param_checksum(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --- sampling -----------------------------------------------------------------


@dataclass
class Generation:
    tokens: list[int]
    logprobs: list[float]
    finished: bool

    @property
    def length(self) -> int:
        """Generated length, excluding a terminating eos."""
        return len(self.tokens) - (1 if self.finished else 0)

    @property
    def mean_logprob(self) -> float:
        return float(np.mean(self.logprobs)) if self.logprobs else 0.0


def _draw(logits: torch.Tensor, temperature: float, top_k: int, u: np.ndarray) -> torch.Tensor:
    if temperature <= 1e-6:
        return logits.argmax(-1)
    scaled = logits / temperature
    if top_k and top_k < scaled.shape[-1]:
        vals, idx = torch.topk(scaled, top_k, dim=-1)
    else:
        vals, idx = torch.sort(scaled, dim=-1, descending=True)
    cdf = torch.softmax(vals.double(), dim=-1).cumsum(-1)
    ut = torch.as_tensor(u, dtype=torch.float64).unsqueeze(-1) * cdf[:, -1:]
    pick = torch.searchsorted(cdf, ut).clamp(max=cdf.shape[-1] - 1).squeeze(-1)
    return idx.gather(-1, pick.unsqueeze(-1)).squeeze(-1)


@torch.no_grad()
def generate(
    model: PolicyModel,
    prompts: Sequence[Sequence[int]],
    *,
    max_new_tokens: int,
    eos_id: int,
    pad_id: int,
    temperature: float = 1.0,
    top_k: int = 0,
    rngs: Sequence[np.random.Generator] | None = None,
) -> list[Generation]:
    """Sample continuations for a batch of prompts with a key/value cache.

    Each row draws its randomness from its own generator, so a row's sample does
    not depend on what else shares the batch.  ``logprobs`` are taken under the
    model's own distribution, before temperature or top-k adjustment.
    """
    B = len(prompts)
    if B == 0:
        return []
    if rngs is None:
        rngs = [np.random.default_rng(0) for _ in range(B)]
    if len(rngs) != B:
        raise ValueError("need one generator per prompt")
    out = [Generation([], [], False) for _ in range(B)]
    if max_new_tokens <= 0:
        return out
    batch = make_batch(prompts, [[] for _ in prompts], model.cfg.anchor, pad_id)
    if batch.pos_offset + batch.prompt_len + max_new_tokens > model.cfg.max_context:
        max_new_tokens = model.cfg.max_context - batch.pos_offset - batch.prompt_len
    was_training = model.training
    model.eval()
    logits, cache = model(batch.ids, batch.pad_mask, batch.pos_offset)
    last = logits[:, -1]
    pad_mask = batch.pad_mask
    done = torch.zeros(B, dtype=torch.bool)
    toks, lps = [], []
    for step in range(max_new_tokens):
        logp = F.log_softmax(last, dim=-1)
        u = np.array([g.random() for g in rngs])
        nxt = _draw(last, temperature, top_k, u)
        toks.append(nxt)
        lps.append(logp.gather(-1, nxt.unsqueeze(-1)).squeeze(-1))
        done |= nxt == eos_id
        if bool(done.all()) or step == max_new_tokens - 1:
            break
        pad_mask = torch.cat([pad_mask, torch.ones(B, 1, dtype=torch.bool)], dim=1)
        logits, cache = model(nxt.unsqueeze(-1), pad_mask, batch.pos_offset, cache)
        last = logits[:, -1]
    tok_arr = torch.stack(toks, 1).numpy()
    lp_arr = torch.stack(lps, 1).numpy()
    for i in range(B):
        hits = np.flatnonzero(tok_arr[i] == eos_id)
        n = int(hits[0]) + 1 if len(hits) else tok_arr.shape[1]
        out[i] = Generation(tok_arr[i, :n].tolist(), lp_arr[i, :n].astype(float).tolist(), bool(len(hits)))
    model.train(was_training)
    return out


@torch.no_grad()
def beam_search(
    model: PolicyModel,
    prompt: Sequence[int],
    *,
    beam_width: int,
    n_best: int,
    max_new_tokens: int,
    eos_id: int,
    pad_id: int,
) -> list[Generation]:
    """Plain beam search over one prompt; returns up to ``n_best`` hypotheses by mean log-prob."""
    beams: list[tuple[list[int], list[float]]] = [([], [])]
    finished: list[Generation] = []
    for _ in range(max_new_tokens):
        batch = make_batch([prompt] * len(beams), [toks for toks, _ in beams], model.cfg.anchor, pad_id)
        logits, _ = model(batch.ids, batch.pad_mask, batch.pos_offset)
        logp = F.log_softmax(logits[:, -1], dim=-1)
        cand = []
        for b, (toks, lps) in enumerate(beams):
            score = sum(lps)
            vals, idx = torch.topk(logp[b], beam_width)
            for v, i in zip(vals.tolist(), idx.tolist()):
                cand.append((score + v, toks + [i], lps + [v]))
        cand.sort(key=lambda c: -c[0])
        beams = []
        for _, toks, lps in cand:
            if toks[-1] == eos_id:
                finished.append(Generation(toks, lps, True))
            else:
                beams.append((toks, lps))
            if len(beams) == beam_width:
                break
        if len(finished) >= n_best or not beams:
            break
    finished.extend(Generation(t, l, False) for t, l in beams)
    finished.sort(key=lambda g: -g.mean_logprob)
    return finished[:n_best]
