"""Whitespace/punctuation tokenizer with one token per integer."""
from __future__ import annotations

import re
from typing import Iterable, Sequence

from .templates import PromptTemplate, bundled_templates, synthetic_word

PAD, BOS, EOS, SEP, UNK = "<pad>", "<bos>", "<eos>", "<sep>", "<unk>"
CLS = ("<cls0>", "<cls1>", "<cls2>")
SPECIALS = (PAD, BOS, EOS, SEP, UNK) + CLS

# words start with a letter; digit runs are numbers; any other char stands alone
_TOKEN_RE = re.compile(r"[A-Za-z][A-Za-z0-9]*|\d+|\S")

SCP_WORDS = ("equal", "to", "less", "more", "than", "between", "and", "tokens", "none", ":")
PUNCT = tuple(".,!?'\";:-()")


def split(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


class Tokenizer:
    """Deterministic vocabulary: specials, integers ``0..max_number``, then words.

    ``encode(decode(ids)) == ids`` for in-vocabulary ids, and ``decode(encode(t)) == t``
    for text already in normal form (tokens joined by single spaces).
    """

    def __init__(self, words: Iterable[str], max_number: int = 512):
        self.max_number = int(max_number)
        self.itos: list[str] = list(SPECIALS) + [str(i) for i in range(self.max_number + 1)]
        seen = set(self.itos)
        for w in words:
            if w in seen or w.isdigit():
                continue
            if not _TOKEN_RE.fullmatch(w):
                raise ValueError(f"not a single token: {w!r}")
            seen.add(w)
            self.itos.append(w)
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.pad_id = self.stoi[PAD]
        self.bos_id = self.stoi[BOS]
        self.eos_id = self.stoi[EOS]
        self.sep_id = self.stoi[SEP]
        self.unk_id = self.stoi[UNK]
        self.cls_ids = tuple(self.stoi[c] for c in CLS)
        self.number_offset = len(SPECIALS)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def number_id(self, value: int) -> int:
        if not 0 <= value <= self.max_number:
            raise ValueError(f"number {value} outside 0..{self.max_number}")
        return self.number_offset + value

    def number_value(self, token_id: int) -> int | None:
        v = token_id - self.number_offset
        return v if 0 <= v <= self.max_number else None

    def number_values(self) -> list[int]:
        """Per-id numeric value, -1 for non-number tokens."""
        return [self.number_value(i) if self.number_value(i) is not None else -1 for i in range(self.vocab_size)]

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.stoi.get(tok, unk) for tok in split(text)]

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        out = []
        for i in ids:
            s = self.itos[int(i)]
            if skip_special and s in SPECIALS:
                continue
            out.append(s)
        return " ".join(out)

    def count(self, text: str) -> int:
        return len(split(text))

    def to_dict(self) -> dict:
        n = len(SPECIALS) + self.max_number + 1
        return {"max_number": self.max_number, "words": self.itos[n:]}

    @classmethod
    def from_dict(cls, d: dict) -> Tokenizer:
        return cls(d["words"], d["max_number"])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Tokenizer) and self.itos == other.itos

    @classmethod
    def build(
        cls,
        texts: Iterable[str] = (),
        templates: Sequence[PromptTemplate] | None = None,
        synthetic_vocab: int = 0,
        max_number: int = 512,
    ) -> Tokenizer:
        """Vocabulary from SCP words, all template words, synthetic words and extra texts."""
        templates = bundled_templates() if templates is None else templates
        words: list[str] = list(SCP_WORDS) + list(PUNCT)
        for t in templates:
            words.extend(split(t.pattern.replace("!", " ").replace("?", " ").replace("*", " ")))
        words.extend(synthetic_word(i) for i in range(synthetic_vocab))
        extra: dict[str, None] = {}
        for text in texts:
            for tok in split(text):
                extra.setdefault(tok, None)
        words.extend(extra)
        return cls(words, max_number)
