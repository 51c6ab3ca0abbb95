"""Standard prompt extractors: a rule-based parser and a learned min/max classifier."""
from __future__ import annotations

import enum
import logging
import re
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import ModelConfig, Transformer, adamw_step, make_adamw
from .scp import SCP, ControlType, InvalidSCP, StandardControlPrompt
from .templates import AugmentedExample
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)


class Source(str, enum.Enum):
    RULE_BASED = "RuleBased"
    LEARNED = "Learned"


@dataclass(frozen=True)
class ParseResult:
    scp: StandardControlPrompt
    confidence: float
    source: Source

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        if self.source is Source.RULE_BASED and self.confidence != 1.0:
            raise ValueError("rule-based results have confidence 1")


class AmbiguousInstruction(ValueError):
    """Several disjoint control phrases disagree."""

    def __init__(self, utterance: str, candidates: Sequence[StandardControlPrompt]):
        self.utterance = utterance
        self.candidates = list(candidates)
        super().__init__("conflicting length instructions: " + "; ".join(map(str, self.candidates)))


# --- rule-based parser ----------------------------------------------------------

_N = r"(\d+)"
# (pattern, type, strong); weak cues only count when no strong cue claims the number
_CUES: list[tuple[re.Pattern, ControlType, bool]] = [
    (re.compile(rf"\bbetween\s+{_N}\s+and\s+{_N}", re.I), ControlType.BETWEEN, True),
    (re.compile(rf"\b{_N}\s*(?:to|-)\s*{_N}\b", re.I), ControlType.BETWEEN, True),
    (re.compile(rf"\bno\s+(?:longer|more)\s+than\s+{_N}", re.I), ControlType.LESS, True),
    (re.compile(rf"\b(?:less|smaller|shorter|fewer)\s+than\s+{_N}", re.I), ControlType.LESS, True),
    (re.compile(rf"\b(?:within|under)\s+{_N}", re.I), ControlType.LESS, True),
    (re.compile(rf"\b(?:up\s+to|at\s+most)\s+{_N}", re.I), ControlType.LESS, True),
    (re.compile(rf"\bno\s+(?:shorter|less|fewer)\s+than\s+{_N}", re.I), ControlType.MORE, True),
    (re.compile(rf"\b(?:more|larger|greater|longer)\s+than\s+{_N}", re.I), ControlType.MORE, True),
    (re.compile(rf"\b(?:over|above|at\s+least)\s+{_N}", re.I), ControlType.MORE, True),
    (re.compile(rf"\b(?:exactly|equal\s+to|about|around)\s+{_N}", re.I), ControlType.EQUAL, True),
    (re.compile(rf"\blength\s+(?:of\s+)?{_N}", re.I), ControlType.EQUAL, False),
    (re.compile(rf"\b{_N}\s+tokens\b", re.I), ControlType.EQUAL, False),
]
_QUOTED = re.compile(r'"[^"]*"')


@dataclass(frozen=True)
class _Cue:
    start: int
    end: int
    strong: bool
    scp: StandardControlPrompt


def _cue_scp(ctype: ControlType, nums: tuple[int, ...]) -> StandardControlPrompt | None:
    try:
        if ctype is ControlType.BETWEEN:
            a, b = sorted(nums)
            return SCP.equal(a) if a == b else SCP.between(a, b)
        n = nums[0]
        return {ControlType.LESS: SCP.less, ControlType.MORE: SCP.more, ControlType.EQUAL: SCP.equal}[ctype](n)
    except InvalidSCP:
        return None


def _cues(text: str) -> list[_Cue]:
    found = []
    for pat, ctype, strong in _CUES:
        for m in pat.finditer(text):
            scp = _cue_scp(ctype, tuple(int(g) for g in m.groups()))
            if scp is not None:
                found.append(_Cue(m.start(), m.end(), strong, scp))
    # strong before weak, then longer spans first; keep non-overlapping
    found.sort(key=lambda c: (not c.strong, -(c.end - c.start), c.start))
    kept: list[_Cue] = []
    for c in found:
        if all(c.end <= k.start or c.start >= k.end for k in kept):
            kept.append(c)
    return sorted(kept, key=lambda c: c.start)


def parse_rule_based(utterance: str) -> ParseResult:
    """Deterministic cue grammar; returns a None-type SCP when no length cue is present.

    Cues outside double-quoted spans win over cues inside them (the quoted span
    is usually the article).  Raises :class:`AmbiguousInstruction` when the
    remaining cues disagree.
    """
    cues = _cues(utterance)
    quoted = [(m.start(), m.end()) for m in _QUOTED.finditer(utterance)]
    outside = [c for c in cues if not any(s <= c.start and c.end <= e for s, e in quoted)]
    chosen = outside or cues
    strong = [c for c in chosen if c.strong]
    chosen = strong or chosen
    distinct = list(dict.fromkeys(c.scp for c in chosen))
    if not distinct:
        return ParseResult(SCP.none(), 1.0, Source.RULE_BASED)
    if len(distinct) > 1:
        raise AmbiguousInstruction(utterance, distinct)
    return ParseResult(distinct[0], 1.0, Source.RULE_BASED)


# --- min/max encoding -------------------------------------------------------------

ABSENT = None


def scp_to_minmax_encoding(scp: StandardControlPrompt) -> tuple[int | None, int | None]:
    t = scp.control_type
    if t is ControlType.NONE:
        return None, None
    if t is ControlType.LESS:
        return 0, scp.max_tokens
    if t is ControlType.MORE:
        return scp.min_tokens, None
    return scp.min_tokens, scp.max_tokens


def minmax_to_scp(lo: int | None, hi: int | None) -> StandardControlPrompt:
    """Inverse of :func:`scp_to_minmax_encoding`; ``(absent, m)`` also reads as Less."""
    if lo is None and hi is None:
        return SCP.none()
    if lo is None or lo == 0:
        if hi is None:
            raise InvalidSCP("minimum 0 with no maximum is not a constraint")
        return SCP.less(hi)
    if hi is None:
        return SCP.more(lo)
    if lo > hi:
        raise InvalidSCP(f"minimum {lo} exceeds maximum {hi}")
    return SCP.equal(lo) if lo == hi else SCP.between(lo, hi)


def case_correct(pred_min: int | None, pred_max: int | None, label: StandardControlPrompt) -> bool:
    """Per-example correctness under the case-by-case protocol."""
    t = label.control_type
    if t is ControlType.NONE:
        return True
    if t is ControlType.MORE:
        return pred_min == label.min_tokens and (pred_max is None or pred_max > pred_min)
    if t is ControlType.LESS:
        return pred_max == label.max_tokens and (pred_min in (None, 0) or pred_min < pred_max)
    return pred_min == label.min_tokens and pred_max == label.max_tokens


# --- learned extractor ------------------------------------------------------------

_TYPES = (ControlType.NONE, ControlType.EQUAL, ControlType.LESS, ControlType.MORE, ControlType.BETWEEN)


@dataclass
class ExtractorConfig:
    mode: str = "cls-2"
    v_max: int = 200
    max_len: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-7
    batch_size: int = 64
    epochs: int = 4
    val_every: int = 100
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    n_train: int = 20000
    n_val: int = 1000
    p_none: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("cls-2", "cls-3"):
            raise ValueError(f"mode must be cls-2 or cls-3, not {self.mode!r}")

    @property
    def n_cls(self) -> int:
        return 2 if self.mode == "cls-2" else 3


class ExtractorModel(nn.Module):
    """Bidirectional encoder with [CLS] slots feeding min, max (and type) heads.

    Value classes are ``0 = absent`` and ``1 + v`` for ``v`` in ``0..v_max``.
    Each value head scores two learned slots (absent, zero) against every input
    position; position scores are pooled into the class of the number token
    sitting there, so a head classifies a value by pointing at where it was read.
    """

    kind = "extractor"

    def __init__(self, cfg: ModelConfig, ecfg: ExtractorConfig):
        super().__init__()
        if cfg.causal:
            raise ValueError("extractor needs a bidirectional encoder (causal=False)")
        if len(cfg.number_values) != cfg.vocab_size:
            raise ValueError("extractor needs number_values for the vocabulary")
        self.cfg, self.ecfg = cfg, ecfg
        self.body = Transformer(cfg)
        d = cfg.d_model
        values = torch.tensor(cfg.number_values)
        cls = torch.where((values >= 0) & (values <= ecfg.v_max), values + 1, -1)
        self.register_buffer("value_class", cls, persistent=False)
        g = torch.Generator().manual_seed(cfg.seed + 2)
        self.query = nn.Parameter(torch.randn(2, d, d, generator=g) * d**-0.5)
        self.key = nn.Parameter(torch.randn(2, d, d, generator=g) * d**-0.5)
        self.slots = nn.Parameter(torch.zeros(2, 2, d))  # (head, {absent, zero}, d)
        self.type_head = nn.Linear(d, len(_TYPES)) if ecfg.n_cls == 3 else None

    def checkpoint_config(self) -> dict:
        return {"extractor": asdict(self.ecfg)}

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor):
        h, _ = self.body(ids, pad_mask)
        B, T, d = h.shape
        n_classes = self.ecfg.v_max + 2
        cls_of = self.value_class[ids]  # (B, T), -1 where not a usable number
        valid = (cls_of >= 0) & pad_mask
        out = []
        for k in range(2):
            q = h[:, k] @ self.query[k]  # (B, d)
            keys = h @ self.key[k]  # (B, T, d)
            pos = (keys @ q.unsqueeze(-1)).squeeze(-1) / d**0.5
            pos = pos.masked_fill(~valid, float("-inf"))
            slot = self.slots[k] @ q.unsqueeze(-1)  # (B, 2, 1)
            slot = slot.squeeze(-1) / d**0.5
            top = torch.maximum(pos.max(-1).values, slot.max(-1).values).detach()
            w = torch.exp(pos - top[:, None])  # zero at masked positions
            mass = torch.zeros(B, n_classes, dtype=h.dtype)
            mass = mass.scatter_add(1, cls_of.clamp(min=0), w)
            mass[:, :2] += torch.exp(slot - top[:, None])
            out.append(torch.log(mass.clamp(min=1e-30)) + top[:, None])
        type_logits = self.type_head(h[:, 2]) if self.type_head is not None else None
        return out[0], out[1], type_logits


def _value_class(v: int | None, v_max: int) -> int:
    if v is None:
        return 0
    if not 0 <= v <= v_max:
        raise ValueError(f"value {v} outside 0..{v_max}")
    return v + 1


def _class_value(c: int) -> int | None:
    return None if c == 0 else c - 1


def encode_utterances(tok: Tokenizer, utterances: Sequence[str], n_cls: int, max_len: int):
    seqs = []
    for u in utterances:
        ids = list(tok.cls_ids[:n_cls]) + tok.encode(u)
        seqs.append(ids[:max_len])
    T = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), T), tok.pad_id, dtype=torch.long)
    mask = torch.zeros(len(seqs), T, dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s)
        mask[i, : len(s)] = True
    return ids, mask


def _targets(examples: Sequence[AugmentedExample], ecfg: ExtractorConfig):
    lo, hi, ty = [], [], []
    for ex in examples:
        a, b = scp_to_minmax_encoding(ex.scp_label)
        lo.append(_value_class(a, ecfg.v_max))
        hi.append(_value_class(b, ecfg.v_max))
        ty.append(_TYPES.index(ex.scp_label.control_type))
    return torch.tensor(lo), torch.tensor(hi), torch.tensor(ty)


def extractor_loss(model: ExtractorModel, tok: Tokenizer, examples: Sequence[AugmentedExample]) -> torch.Tensor:
    ecfg = model.ecfg
    ids, mask = encode_utterances(tok, [e.utterance for e in examples], ecfg.n_cls, ecfg.max_len)
    lo_t, hi_t, ty_t = _targets(examples, ecfg)
    lo, hi, ty = model(ids, mask)
    loss = F.cross_entropy(lo, lo_t) + F.cross_entropy(hi, hi_t)
    if ty is not None:
        loss = loss + F.cross_entropy(ty, ty_t)
    return loss


def new_extractor(tok: Tokenizer, ecfg: ExtractorConfig) -> ExtractorModel:
    cfg = ModelConfig(
        vocab_size=tok.vocab_size, n_layers=ecfg.n_layers, n_heads=ecfg.n_heads, d_model=ecfg.d_model,
        max_context=ecfg.max_len, anchor=0, causal=False, seed=ecfg.seed, number_values=tok.number_values(),
    )
    return ExtractorModel(cfg, ecfg)


@dataclass
class ExtractorTrainResult:
    model: ExtractorModel
    history: list[dict] = field(default_factory=list)


def train_extractor(
    model: ExtractorModel,
    tok: Tokenizer,
    dataset: Sequence[AugmentedExample],
    val: Sequence[AugmentedExample] = (),
    on_validate: Callable[[dict], None] | None = None,
) -> ExtractorTrainResult:
    """Minimise the summed head cross-entropies with AdamW."""
    if not dataset:
        raise ValueError("empty extractor training set")
    ecfg = model.ecfg
    rng = np.random.default_rng(ecfg.seed)
    opt = make_adamw(model.parameters(), ecfg.lr, weight_decay=ecfg.weight_decay)
    steps_per_epoch = max(1, len(dataset) // ecfg.batch_size)
    total = steps_per_epoch * ecfg.epochs
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / 50) * max(0.05, 1 - s / total))
    history = []
    step = 0
    t0 = time.time()
    for _ in range(ecfg.epochs):
        order = rng.permutation(len(dataset))
        for b in range(steps_per_epoch):
            batch = [dataset[int(i)] for i in order[b * ecfg.batch_size : (b + 1) * ecfg.batch_size]]
            model.train()
            loss = extractor_loss(model, tok, batch)
            loss.backward()
            adamw_step(opt, model, 1.0)
            sched.step()
            step += 1
            if val and (step % ecfg.val_every == 0 or step == total):
                rep = eval_extractor(model, tok, val)
                rec = {"step": step, "loss": loss.item(), "accuracy": rep["accuracy"], "elapsed": time.time() - t0}
                history.append(rec)
                log.info("spe step %d loss %.4f acc %.4f", step, rec["loss"], rec["accuracy"])
                if on_validate:
                    on_validate(rec)
    model.eval()
    return ExtractorTrainResult(model, history)


@torch.no_grad()
def predict_minmax(
    model: ExtractorModel, tok: Tokenizer, utterances: Sequence[str], batch_size: int = 256
) -> list[tuple[int | None, int | None, ControlType | None, float]]:
    """Raw head argmaxes: ``(min, max, type or None, confidence)`` per utterance."""
    model.eval()
    out = []
    for s in range(0, len(utterances), batch_size):
        chunk = utterances[s : s + batch_size]
        ids, mask = encode_utterances(tok, chunk, model.ecfg.n_cls, model.ecfg.max_len)
        lo, hi, ty = model(ids, mask)
        plo, phi = F.softmax(lo, -1), F.softmax(hi, -1)
        conf = plo.max(-1).values * phi.max(-1).values
        types: list[ControlType | None] = [None] * len(chunk)
        if ty is not None:
            pty = F.softmax(ty, -1)
            conf = conf * pty.max(-1).values
            types = [_TYPES[int(i)] for i in pty.argmax(-1)]
        for i in range(len(chunk)):
            out.append((_class_value(int(lo[i].argmax())), _class_value(int(hi[i].argmax())), types[i], float(conf[i])))
    return out


def _decode(lo: int | None, hi: int | None, ctype: ControlType | None) -> StandardControlPrompt | None:
    """SCP from head outputs; cls-3 trusts the type head and repairs the values."""
    try:
        if ctype is None:
            return minmax_to_scp(lo, hi)
        vals = [v for v in (lo, hi) if v]
        if ctype is ControlType.NONE:
            return SCP.none()
        if ctype is ControlType.EQUAL:
            return SCP.equal(hi if hi else lo)
        if ctype is ControlType.LESS:
            return SCP.less(hi if hi else max(vals))
        if ctype is ControlType.MORE:
            return SCP.more(lo if lo else min(vals))
        return SCP.between(lo, hi) if lo and hi and lo < hi else minmax_to_scp(lo, hi)
    except (InvalidSCP, ValueError, TypeError):
        return None


def extract(model: ExtractorModel, tok: Tokenizer, utterance: str) -> ParseResult | None:
    """Learned SCP for one utterance, or None when the heads decode to nothing valid."""
    return extract_batch(model, tok, [utterance])[0]


def extract_batch(model: ExtractorModel, tok: Tokenizer, utterances: Sequence[str]) -> list[ParseResult | None]:
    out = []
    for lo, hi, ty, conf in predict_minmax(model, tok, utterances):
        scp = _decode(lo, hi, ty)
        out.append(None if scp is None else ParseResult(scp, min(1.0, max(0.0, conf)), Source.LEARNED))
    return out


def eval_extractor(model: ExtractorModel, tok: Tokenizer, dataset: Sequence[AugmentedExample]) -> dict:
    """Case-by-case accuracy overall and per label type."""
    preds = predict_minmax(model, tok, [e.utterance for e in dataset])
    hits: dict[str, list[bool]] = {}
    for ex, (lo, hi, ty, _) in zip(dataset, preds):
        if ty is not None:
            scp = _decode(lo, hi, ty)
            lo, hi = scp_to_minmax_encoding(scp) if scp is not None else (lo, hi)
        hits.setdefault(ex.scp_label.control_type.value, []).append(case_correct(lo, hi, ex.scp_label))
    flat = [h for v in hits.values() for h in v]
    return {
        "mode": model.ecfg.mode,
        "n": len(flat),
        "accuracy": float(np.mean(flat)) if flat else float("nan"),
        "per_type_accuracy": {k: float(np.mean(v)) for k, v in sorted(hits.items())},
    }


# --- extractor front-ends ------------------------------------------------------------


class RuleBasedExtractor:
    def __call__(self, utterances: Sequence[str]) -> list[ParseResult | AmbiguousInstruction]:
        out: list[ParseResult | AmbiguousInstruction] = []
        for u in utterances:
            try:
                out.append(parse_rule_based(u))
            except AmbiguousInstruction as e:
                out.append(e)
        return out


class LearnedExtractor:
    """Learned heads with the rule-based parser as fallback when they abstain."""

    def __init__(self, model: ExtractorModel, tok: Tokenizer, min_confidence: float = 0.5, fallback: bool = True):
        self.model, self.tok = model, tok
        self.min_confidence = min_confidence
        self.fallback = fallback

    def __call__(self, utterances: Sequence[str]) -> list[ParseResult | AmbiguousInstruction | None]:
        out: list[ParseResult | AmbiguousInstruction | None] = []
        for u, r in zip(utterances, extract_batch(self.model, self.tok, list(utterances))):
            if (r is None or r.confidence < self.min_confidence) and self.fallback:
                try:
                    r = parse_rule_based(u)
                except AmbiguousInstruction as e:
                    r = e
            out.append(r)
        return out
