"""Prompt templates, target sampling, synthetic corpora and dataset builders.

Placeholders: ``*`` is the article, ``!`` the minimum and ``?`` the maximum
target length.  Equal and Less templates carry ``?``, More carries ``!``,
Between carries ``!`` then ``?``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .scp import CONSTRAINED_TYPES, SCP, ControlType, StandardControlPrompt

TARGET_MIN = 50
TARGET_MAX = 150

_EQUAL = [
    'summarize "*" with length ?',
    'summarize the following document with length ?: "*" \'',
    "Summarize with exactly ? tokens: *'",
    'I want a summary of "*" with exactly ? Tokens',
    'Give me a summary with ? tokens from "*"\'',
    'Please summarize "*" with exactly ? Tokens',
    'Write a summary of "*" with exactly ? Tokens',
    'summarize "*" with ? tokens for me',
    'Please give me a summary of "*" with ? Tokens',
    'I need a summary of length ? for "*"',
    'generate a summary for "*" with length ?',
    'Need a summary of "*" with length equal to ?',
    'write a summary of length ? for "*"',
    'summarize with length equal to ?: "*"\'',
    'summarize with exactly ? tokens:"*"',
    'summarize this document with about ? tokens: "*"',
    'summarize "*" with around ? tokens',
    'need a summary of "*" with length ?',
]

_LESS = [
    'summarize "*" with length smaller than ?',
    # the published row uses "!" here; Less templates carry the maximum
    'summarize the following document with length smaller than ?: "*"',
    "Summarize with less than ? tokens: *",
    'I want a summary of "*" with less than ? Tokens',
    'Give me a summary with less than ? tokens from "*"',
    'Please summarize "*" with less than ? Tokens',
    'Write a summary of "*" with less than ? Tokens',
    'summarize "*" with less than ? tokens for me',
    'Please give me a summary of "*" with less than ? Tokens',
    'I need a summary of length smaller than ? for "*"',
    'I need a summary of length less than ? for "*"',
    'Need a summary of "*" with length smaller than ?',
    'summarize the following article with no longer than ? tokens: "*"',
    'summarize the following article with shorter than ? tokens: "*"',
    'write a summary of length smaller than ? for "*"',
    'summarize with length smaller than ?: "*"',
    'summarize with less than ? tokens:"*"',
    'summarize "*" within ? tokens',
]

_MORE = [
    'summarize "*" with length larger than !',
    'summarize the following document with length larger than !: "*"',
    "Summarize with more than ! tokens: *",
    'I want a summary of "*" with more than ! Tokens',
    'Give me a summary with more than ! tokens from "*"',
    'Please summarize "*" with more than ! Tokens',
    'Write a summary of "*" with more than ! Tokens',
    'summarize "*" with more than ! tokens for me',
    'Please give me a summary of "*" with more than ! Tokens',
    'I need a summary of length greater than ! for "*"',
    'I need a summary of length larger than ! for "*"',
    'Need a summary of "*" with length larger than !',
    'summarize the following article with longer than ! tokens: "*"',
    'write a summary of length larger than ! for "*"',
    'summarize with length larger than !: "*"',
    'summarize with more than ! tokens:"*"',
    # the published rows use "?" in the next two; More templates carry the minimum
    'summarize the following article with over ! tokens:"*"',
    'summarize "*" with over ! tokens',
]

_BETWEEN = [
    'summarize "*" with length between ! and ?',
    'summarize the following document with length between ! and ?: "*"',
    "Summarize with between ! and ? tokens: *",
    'I want a summary of "*" with between ! and ? Tokens',
    'Give me a summary with between ! and ? tokens from "*"',
    'Please summarize "*" with between ! and ? Tokens',
    'Write a summary of "*" with between ! and ? Tokens',
    'summarize "*" with between ! and ? tokens for me',
    'Please give me a summary of "*" with between ! and ? Tokens',
    'I need a summary of length between ! and ? for "*"',
    'Need a summary of "*" with length between ! and ?',
    'write a summary of length between ! and ? for "*"',
    'summarize with length between ! and ?: "*"',
    'summarize with between ! and ? tokens:"*"',
    'summarize with ! to ? tokens:"*"',
    'summarize "*" with ! to ? Tokens',
    'Please summarize "*" with ! to ? Tokens',
    'summarize following article with ! to ? tokens: "*"',
]

_BUNDLED = {
    ControlType.EQUAL: _EQUAL,
    ControlType.LESS: _LESS,
    ControlType.MORE: _MORE,
    ControlType.BETWEEN: _BETWEEN,
}

NONE_TEMPLATE_ID = "none"


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    control_type: ControlType
    pattern: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "control_type", ControlType(self.control_type))
        t, p = self.control_type, self.pattern
        if p.count("*") != 1:
            raise TemplateError(f"{self.id}: pattern must contain '*' exactly once")
        want = {
            ControlType.EQUAL: (0, 1),
            ControlType.LESS: (0, 1),
            ControlType.MORE: (1, 0),
            ControlType.BETWEEN: (1, 1),
            ControlType.NONE: (0, 0),
        }[t]
        if (p.count("!"), p.count("?")) != want:
            raise TemplateError(f"{self.id}: placeholder arity does not match type {t.value}")
        if t is ControlType.BETWEEN and p.index("!") > p.index("?"):
            raise TemplateError(f"{self.id}: '!' must precede '?'")

    def to_dict(self) -> dict:
        return {"id": self.id, "type": self.control_type.value, "pattern": self.pattern}

    @classmethod
    def from_dict(cls, d: dict) -> PromptTemplate:
        return cls(str(d["id"]), ControlType(d["type"]), str(d["pattern"]))


def bundled_templates() -> list[PromptTemplate]:
    out = []
    for ctype, patterns in _BUNDLED.items():
        for i, p in enumerate(patterns, 1):
            out.append(PromptTemplate(f"{ctype.abbrev.lower()}-{i:02d}", ctype, p))
    return out


@dataclass
class AugmentedExample:
    utterance: str
    scp_label: StandardControlPrompt
    article: str
    reference_summary: str | None = None
    template_id: str = NONE_TEMPLATE_ID

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scp_label"] = self.scp_label.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AugmentedExample:
        return cls(
            utterance=str(d["utterance"]),
            scp_label=SCP.from_dict(d["scp_label"]),
            article=str(d["article"]),
            reference_summary=d.get("reference_summary"),
            template_id=str(d.get("template_id", NONE_TEMPLATE_ID)),
        )


def sample_target_lengths(
    rng: np.random.Generator, control_type: ControlType, lo: int = TARGET_MIN, hi: int = TARGET_MAX
) -> tuple[int | None, int | None]:
    """Uniform integer targets on ``[lo, hi]`` inclusive."""
    t = ControlType(control_type)
    if t is ControlType.NONE:
        return None, None
    if t is ControlType.BETWEEN:
        while True:
            a, b = (int(x) for x in rng.integers(lo, hi + 1, size=2))
            if a != b:
                return min(a, b), max(a, b)
    n = int(rng.integers(lo, hi + 1))
    if t is ControlType.EQUAL:
        return n, n
    if t is ControlType.LESS:
        return None, n
    return n, None


def sample_scp(rng: np.random.Generator, control_type: ControlType) -> StandardControlPrompt:
    lo, hi = sample_target_lengths(rng, control_type)
    return SCP(ControlType(control_type), lo, hi)


def sample_scp_for_reference(
    rng: np.random.Generator,
    control_type: ControlType,
    ref_len: int,
    lo: int = TARGET_MIN,
    hi: int = TARGET_MAX,
) -> StandardControlPrompt:
    """Sample targets in ``[lo, hi]`` that the reference length satisfies.

    Bounds that cannot contain ``ref_len`` inside ``[lo, hi]`` are clamped to it.
    """
    if ref_len < 1:
        raise ValueError("ref_len must be >= 1")
    t = ControlType(control_type)
    if t is ControlType.NONE:
        return SCP.none()
    if t is ControlType.EQUAL:
        return SCP.equal(ref_len)
    if t is ControlType.LESS:
        a = max(ref_len, lo)
        return SCP.less(int(rng.integers(a, hi + 1)) if a <= hi else ref_len)
    if t is ControlType.MORE:
        b = min(ref_len, hi)
        return SCP.more(int(rng.integers(lo, b + 1)) if b >= lo else ref_len)
    # between: independent uniform bounds on each side of ref_len, equal pair rejected
    lo_range = (lo, min(ref_len, hi)) if ref_len >= lo else (ref_len, ref_len)
    hi_range = (max(ref_len, lo), hi) if ref_len <= hi else (ref_len, ref_len)
    while True:
        a = int(rng.integers(lo_range[0], lo_range[1] + 1))
        b = int(rng.integers(hi_range[0], hi_range[1] + 1))
        if a < b:
            return SCP.between(a, b)
        if lo_range[0] == lo_range[1] == hi_range[0] == hi_range[1]:
            raise ValueError(f"cannot build a between-range around {ref_len}")


def fill_template(
    template: PromptTemplate,
    scp: StandardControlPrompt,
    article: str,
    reference_summary: str | None = None,
) -> AugmentedExample:
    if template.control_type is not scp.control_type:
        raise TemplateError(
            f"template {template.id} is {template.control_type.value}, scp is {scp.control_type.value}"
        )
    text = template.pattern
    if "!" in text:
        text = text.replace("!", str(scp.min_tokens))
    if "?" in text:
        text = text.replace("?", str(scp.max_tokens))
    # article goes in last so '!'/'?' inside it survive
    text = text.replace("*", article)
    return AugmentedExample(text, scp, article, reference_summary, template.id)


def none_example(article: str, reference_summary: str | None = None) -> AugmentedExample:
    return AugmentedExample(article, SCP.none(), article, reference_summary, NONE_TEMPLATE_ID)


def by_type(templates: Sequence[PromptTemplate]) -> dict[ControlType, list[PromptTemplate]]:
    out: dict[ControlType, list[PromptTemplate]] = {}
    for t in templates:
        out.setdefault(t.control_type, []).append(t)
    return out


def split_templates(
    templates: Sequence[PromptTemplate], rng: np.random.Generator, holdout_fraction: float
) -> tuple[list[PromptTemplate], list[PromptTemplate]]:
    """Stratified split into (in-sample, out-sample) per control type."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must lie strictly between 0 and 1")
    ins: list[PromptTemplate] = []
    outs: list[PromptTemplate] = []
    groups = by_type(templates)
    for ctype in sorted(groups, key=lambda c: c.value):
        group = groups[ctype]
        n_out = int(round(holdout_fraction * len(group)))
        if n_out == 0 or n_out == len(group):
            raise ValueError(
                f"holdout_fraction {holdout_fraction} leaves an empty stratum for {ctype.value}"
            )
        perm = rng.permutation(len(group))
        held = set(perm[:n_out].tolist())
        for i, t in enumerate(group):
            (outs if i in held else ins).append(t)
    return ins, outs


# --- synthetic corpus -------------------------------------------------------


class Document(NamedTuple):
    article: str
    summary: str

    def to_dict(self) -> dict:
        return {"article": self.article, "summary": self.summary}

    @classmethod
    def from_dict(cls, d: dict) -> Document:
        a, s = d["article"], d["summary"]
        if not isinstance(a, str) or not isinstance(s, str):
            raise TypeError("'article' and 'summary' must be strings")
        if not a.strip():
            raise ValueError("empty article")
        return cls(a, s)


@dataclass
class SyntheticCorpusParams:
    n_examples: int = 10000
    summary_len_mean: float = 71.0
    summary_len_sd: float = 28.0
    article_len_mean: float = 48.0
    article_len_sd: float = 8.0
    vocab_size: int = 1000
    n_keywords: int = 8
    min_summary_len: int = 10
    max_summary_len: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 50:
            raise ValueError("vocab_size must be >= 50")
        if self.n_examples < 0:
            raise ValueError("n_examples must be >= 0")
        if self.summary_len_mean <= 0 or self.article_len_mean <= 0:
            raise ValueError("length means must be > 0")
        if self.summary_len_sd < 0 or self.article_len_sd < 0:
            raise ValueError("length sds must be >= 0")
        if not 1 <= self.n_keywords:
            raise ValueError("n_keywords must be >= 1")


def synthetic_word(i: int) -> str:
    return f"w{i}"


def sample_summary_lengths(rng: np.random.Generator, params: SyntheticCorpusParams, n: int) -> np.ndarray:
    raw = rng.normal(params.summary_len_mean, params.summary_len_sd, size=n)
    return np.clip(np.rint(raw), params.min_summary_len, params.max_summary_len).astype(int)


def gen_synthetic_corpus(params: SyntheticCorpusParams) -> list[Document]:
    """Articles of random words with extractive reference summaries.

    A summary of length L is the article's lead (its first ``min(L, A)`` words)
    followed, when L exceeds the article length A, by the article's first
    ``n_keywords`` words repeated in order until L words are reached.
    Words are Zipf-distributed over ``vocab_size`` and distinct within an article
    where the vocabulary allows it.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    n = params.n_examples
    sum_lens = sample_summary_lengths(rng, params, n)
    art_lens = np.maximum(
        np.rint(rng.normal(params.article_len_mean, params.article_len_sd, size=n)).astype(int),
        params.n_keywords,
    )
    art_lens = np.minimum(art_lens, params.vocab_size)
    ranks = np.arange(1, params.vocab_size + 1)
    probs = 1.0 / ranks**0.6
    probs /= probs.sum()
    docs = []
    for i in range(n):
        ids = rng.choice(params.vocab_size, size=int(art_lens[i]), replace=False, p=probs)
        words = [synthetic_word(int(j)) for j in ids]
        L = int(sum_lens[i])
        summary = words[:L]
        keywords = words[: params.n_keywords]
        k = 0
        while len(summary) < L:
            summary.append(keywords[k % len(keywords)])
            k += 1
        docs.append(Document(" ".join(words), " ".join(summary)))
    return docs


def build_spe_dataset(
    corpus: Sequence[Document],
    templates: Sequence[PromptTemplate],
    rng: np.random.Generator,
    n: int,
    p_none: float = 0.2,
) -> list[AugmentedExample]:
    """Sample an SCP per article, then a template of the matching type."""
    if not corpus:
        raise ValueError("empty corpus")
    groups = by_type(templates)
    types = [t for t in CONSTRAINED_TYPES if t in groups]
    if not types:
        raise ValueError("no constrained templates")
    out = []
    for _ in range(n):
        doc = corpus[int(rng.integers(len(corpus)))]
        if rng.random() < p_none:
            out.append(none_example(doc.article, doc.summary))
            continue
        ctype = types[int(rng.integers(len(types)))]
        group = groups[ctype]
        tpl = group[int(rng.integers(len(group)))]
        out.append(fill_template(tpl, sample_scp(rng, ctype), doc.article, doc.summary))
    return out


def build_rl_examples(
    corpus: Sequence[Document],
    templates: Sequence[PromptTemplate],
    rng: np.random.Generator,
    n: int,
    types: Sequence[ControlType] = CONSTRAINED_TYPES,
) -> list[AugmentedExample]:
    """Augmented examples with targets drawn independently of the reference length."""
    groups = by_type(templates)
    out = []
    for _ in range(n):
        doc = corpus[int(rng.integers(len(corpus)))]
        ctype = types[int(rng.integers(len(types)))]
        if ctype is ControlType.NONE:
            out.append(none_example(doc.article, doc.summary))
            continue
        group = groups[ctype]
        tpl = group[int(rng.integers(len(group)))]
        out.append(fill_template(tpl, sample_scp(rng, ctype), doc.article, doc.summary))
    return out

