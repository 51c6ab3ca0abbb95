"""Standard control prompts and the rule-based length reward."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterable


class ControlType(str, enum.Enum):
    EQUAL = "equal"
    LESS = "less"
    MORE = "more"
    BETWEEN = "between"
    NONE = "none"

    @property
    def abbrev(self) -> str:
        return _ABBREV[self]


_ABBREV = {
    ControlType.EQUAL: "EQ",
    ControlType.LESS: "LE",
    ControlType.MORE: "MO",
    ControlType.BETWEEN: "BT",
    ControlType.NONE: "NO",
}

CONSTRAINED_TYPES = (ControlType.EQUAL, ControlType.LESS, ControlType.MORE, ControlType.BETWEEN)


class InvalidSCP(ValueError):
    pass


@dataclass(frozen=True)
class StandardControlPrompt:
    """Parsed length-control intent.

    ``min_tokens``/``max_tokens`` hold the lower/upper targets; Equal stores its
    target in both.
    """

    control_type: ControlType
    min_tokens: int | None = None
    max_tokens: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "control_type", ControlType(self.control_type))
        lo, hi = self.min_tokens, self.max_tokens
        for v in (lo, hi):
            if v is not None and (isinstance(v, bool) or not isinstance(v, int)):
                raise InvalidSCP(f"token counts must be ints, got {v!r}")
            if v is not None and v < 1:
                raise InvalidSCP(f"token counts must be >= 1, got {v}")
        t = self.control_type
        if t is ControlType.EQUAL:
            ok = lo is not None and lo == hi
        elif t is ControlType.LESS:
            ok = lo is None and hi is not None
        elif t is ControlType.MORE:
            ok = lo is not None and hi is None
        elif t is ControlType.BETWEEN:
            ok = lo is not None and hi is not None and lo < hi
        else:
            ok = lo is None and hi is None
        if not ok:
            raise InvalidSCP(f"inconsistent bounds for {t.value}: min={lo}, max={hi}")

    @classmethod
    def equal(cls, n: int) -> StandardControlPrompt:
        return cls(ControlType.EQUAL, n, n)

    @classmethod
    def less(cls, n: int) -> StandardControlPrompt:
        return cls(ControlType.LESS, None, n)

    @classmethod
    def more(cls, n: int) -> StandardControlPrompt:
        return cls(ControlType.MORE, n, None)

    @classmethod
    def between(cls, lo: int, hi: int) -> StandardControlPrompt:
        return cls(ControlType.BETWEEN, lo, hi)

    @classmethod
    def none(cls) -> StandardControlPrompt:
        return cls(ControlType.NONE)

    def to_dict(self) -> dict:
        return {"type": self.control_type.value, "min": self.min_tokens, "max": self.max_tokens}

    @classmethod
    def from_dict(cls, d: dict) -> StandardControlPrompt:
        return cls(ControlType(d["type"]), d.get("min"), d.get("max"))

    def __str__(self) -> str:
        return render_scp(self)


SCP = StandardControlPrompt


def render_scp(scp: StandardControlPrompt) -> str:
    t = scp.control_type
    if t is ControlType.EQUAL:
        return f"equal to {scp.min_tokens} tokens"
    if t is ControlType.LESS:
        return f"less than {scp.max_tokens} tokens"
    if t is ControlType.MORE:
        return f"more than {scp.min_tokens} tokens"
    if t is ControlType.BETWEEN:
        return f"between {scp.min_tokens} and {scp.max_tokens} tokens"
    return "none"


_CANONICAL = [
    (re.compile(r"equal to ([1-9]\d*) tokens"), lambda m: SCP.equal(int(m[1]))),
    (re.compile(r"less than ([1-9]\d*) tokens"), lambda m: SCP.less(int(m[1]))),
    (re.compile(r"more than ([1-9]\d*) tokens"), lambda m: SCP.more(int(m[1]))),
    (re.compile(r"between ([1-9]\d*) and ([1-9]\d*) tokens"), lambda m: SCP.between(int(m[1]), int(m[2]))),
    (re.compile(r"none"), lambda m: SCP.none()),
]


def parse_canonical(text: str) -> StandardControlPrompt | None:
    """Inverse of :func:`render_scp`; returns None for anything non-canonical."""
    for pattern, build in _CANONICAL:
        m = pattern.fullmatch(text)
        if m:
            try:
                return build(m)
            except InvalidSCP:
                return None
    return None


@dataclass(frozen=True)
class RewardValue:
    reward: float

    @property
    def control_error(self) -> float:
        return 0.0 - self.reward


def compute_reward(scp: StandardControlPrompt, generated_len: int) -> RewardValue:
    if generated_len < 0:
        raise ValueError("generated_len must be >= 0")
    g = float(generated_len)
    t = scp.control_type
    if t is ControlType.MORE:
        r = -max(0.0, scp.min_tokens - g)
    elif t is ControlType.LESS:
        r = -max(0.0, -scp.max_tokens + g)
    elif t is ControlType.EQUAL:
        r = -abs(scp.min_tokens - g)
    elif t is ControlType.BETWEEN:
        r = -(max(0.0, scp.min_tokens - g) + max(0.0, g - scp.max_tokens))
    else:
        r = 0.0
    # avoid -0.0 leaking into logs
    return RewardValue(r + 0.0)


def control_error(scp: StandardControlPrompt, generated_len: int) -> float:
    return compute_reward(scp, generated_len).control_error


def satisfies(scp: StandardControlPrompt, generated_len: int) -> bool:
    lo = scp.min_tokens if scp.min_tokens is not None else 0
    hi = scp.max_tokens if scp.max_tokens is not None else float("inf")
    return lo <= generated_len <= hi


def error_curve(scp: StandardControlPrompt, lengths: Iterable[int]) -> list[tuple[int, float]]:
    return [(int(n), control_error(scp, int(n))) for n in lengths]
