"""ROUGE, control-error suites and reference-length baselines."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .scp import CONSTRAINED_TYPES, ControlType, StandardControlPrompt, control_error
from .templates import TARGET_MAX, TARGET_MIN, Document, PromptTemplate, by_type, fill_template, sample_scp

log = logging.getLogger(__name__)


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap: float, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 100.0 * 2 * p * r / (p + r)


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_f1(candidate: Sequence[Hashable], reference: Sequence[Hashable], variant: str = "R1") -> float:
    """ROUGE F1 in percent over pre-tokenized sequences; 0 when either side is empty."""
    if len(reference) == 0:
        warnings.warn("empty ROUGE reference, score defined as 0", RuntimeWarning, stacklevel=2)
    if variant in ("R1", "R2"):
        n = 1 if variant == "R1" else 2
        c, r = _ngrams(candidate, n), _ngrams(reference, n)
        return _f1(sum((c & r).values()), sum(c.values()), sum(r.values()))
    if variant == "RL":
        return _f1(lcs_length(candidate, reference), len(candidate), len(reference))
    raise ValueError(f"unknown ROUGE variant {variant!r}")


def rouge_scores(candidate: Sequence[Hashable], reference: Sequence[Hashable]) -> dict[str, float]:
    return {
        "rouge1": rouge_f1(candidate, reference, "R1"),
        "rouge2": rouge_f1(candidate, reference, "R2"),
        "rougeL": rouge_f1(candidate, reference, "RL"),
    }


# --- control-error suites -------------------------------------------------------


SETTINGS = ("Prompt", "PromptRL", "PromptFilter", "PromptRLFilter")
ROW_ORDER = ("MU", "EQ", "MO", "LE", "BT")
_METRICS = ("rouge1", "rouge2", "rougeL", "control_error")


@dataclass
class EvalReport:
    """Per-type ROUGE and control error plus the sample-weighted "MU" row."""

    setting: str
    per_type: dict[ControlType, dict] = field(default_factory=dict)
    quality_metric: str = "rougeL"
    item_errors: list[float] = field(default_factory=list)

    def mu(self) -> dict:
        n = sum(r["n"] for r in self.per_type.values())
        if n == 0:
            return {**{m: float("nan") for m in _METRICS}, "n": 0}
        row = {m: sum(r[m] * r["n"] for r in self.per_type.values()) / n for m in _METRICS}
        row["n"] = n
        return row

    def rows(self) -> dict[str, dict]:
        out = {"MU": self.mu()}
        for t in CONSTRAINED_TYPES:
            if t in self.per_type:
                out[t.abbrev] = self.per_type[t]
        return out

    def to_dict(self) -> dict:
        return {"setting": self.setting, "quality_metric": self.quality_metric, "rows": self.rows(),
                "item_errors": list(self.item_errors)}


def _row(errors: list[float], rouges: list[dict]) -> dict:
    return {
        "rouge1": float(np.mean([r["rouge1"] for r in rouges])),
        "rouge2": float(np.mean([r["rouge2"] for r in rouges])),
        "rougeL": float(np.mean([r["rougeL"] for r in rouges])),
        "control_error": float(np.mean(errors)),
        "n": len(errors),
    }


@dataclass
class EvalItem:
    utterance: str
    scp: StandardControlPrompt
    article: str
    reference: str
    template_id: str


def build_eval_set(
    docs: Sequence[Document],
    templates: Sequence[PromptTemplate],
    seed: int,
    types: Sequence[ControlType] = CONSTRAINED_TYPES,
) -> list[EvalItem]:
    """Every document once per type, with a uniformly drawn target and template."""
    rng = np.random.default_rng(seed)
    groups = by_type(templates)
    items = []
    for t in types:
        group = groups[t]
        for d in docs:
            tpl = group[int(rng.integers(len(group)))]
            ex = fill_template(tpl, sample_scp(rng, t), d.article, d.summary)
            items.append(EvalItem(ex.utterance, ex.scp_label, d.article, d.summary, tpl.id))
    return items


def control_error_suite(model, tok, items: Sequence[EvalItem], cfg, setting: str = "Prompt", extractor=None) -> EvalReport:
    """Generate for each item (label SCP unless ``extractor`` is given) and score it.

    ``cfg`` is an :class:`~lenctl.infer.InferenceConfig`; filtering follows
    ``cfg.use_filter`` and ``cfg.n_candidates``.
    """
    from .infer import example_seed, generate_for_scps
    from .spe import ParseResult

    scps = [it.scp for it in items]
    if extractor is not None:
        parsed = extractor([it.utterance for it in items])
        scps = [p.scp if isinstance(p, ParseResult) else StandardControlPrompt.none() for p in parsed]
    seeds = [example_seed(cfg.seed, f"{i}\x00{it.utterance}") for i, it in enumerate(items)]
    results = generate_for_scps(model, tok, [(it.utterance, s, it.article) for it, s in zip(items, scps)], cfg, seeds)
    per: dict[ControlType, tuple[list, list]] = {}
    flat = []
    for it, res in zip(items, results):
        cand = res.candidates[res.selected_index]
        err = control_error(it.scp, cand.length)
        rs = rouge_scores(cand.tokens, tok.encode(it.reference))
        e, r = per.setdefault(it.scp.control_type, ([], []))
        e.append(err)
        r.append(rs)
        flat.append(err)
    return EvalReport(setting, {t: _row(*per[t]) for t in CONSTRAINED_TYPES if t in per}, item_errors=flat)


def baseline_reference_error(
    ref_lengths: Sequence[int],
    rng: np.random.Generator,
    types: Sequence[ControlType] = CONSTRAINED_TYPES,
    lo: int = TARGET_MIN,
    hi: int = TARGET_MAX,
) -> dict[str, float]:
    """Mean control error of the references themselves under uniformly sampled instructions."""
    lengths = np.asarray(ref_lengths, dtype=np.int64)
    n = len(lengths)
    out: dict[str, float] = {}
    for t in types:
        if t is ControlType.BETWEEN:
            a = rng.integers(lo, hi + 1, size=n)
            b = rng.integers(lo, hi + 1, size=n)
            same = a == b
            while same.any():
                b[same] = rng.integers(lo, hi + 1, size=int(same.sum()))
                same = a == b
            mn, mx = np.minimum(a, b), np.maximum(a, b)
            err = np.maximum(mn - lengths, 0) + np.maximum(lengths - mx, 0)
        else:
            x = rng.integers(lo, hi + 1, size=n)
            if t is ControlType.EQUAL:
                err = np.abs(lengths - x)
            elif t is ControlType.LESS:
                err = np.maximum(lengths - x, 0)
            elif t is ControlType.MORE:
                err = np.maximum(x - lengths, 0)
            else:
                err = np.zeros(n)
        out[t.abbrev] = float(err.mean()) if n else float("nan")
    constrained = [out[t.abbrev] for t in types if t in CONSTRAINED_TYPES]
    out["MU"] = float(np.mean(constrained)) if constrained else float("nan")
    return out


class TemplateLeakage(ValueError):
    pass


def generalization_eval(
    model,
    tok,
    docs: Sequence[Document],
    in_templates: Sequence[PromptTemplate],
    out_templates: Sequence[PromptTemplate],
    training_template_ids: set[str],
    cfg,
    seed: int,
) -> dict[str, EvalReport]:
    """In-sample vs out-of-sample rows; refuses held-out templates seen in training."""
    leaked = sorted({t.id for t in out_templates} & set(training_template_ids))
    if leaked:
        raise TemplateLeakage(f"held-out templates appear in the training manifest: {leaked}")
    return {
        "In-sample": control_error_suite(model, tok, build_eval_set(docs, in_templates, seed), cfg, "In-sample"),
        "Out-sample": control_error_suite(model, tok, build_eval_set(docs, out_templates, seed), cfg, "Out-sample"),
    }


# --- writers -----------------------------------------------------------------------------


def write_reports_json(path, reports: Sequence[EvalReport], extra: dict | None = None) -> None:
    data = {"reports": [r.to_dict() for r in reports], **(extra or {})}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))


def write_reports_csv(path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["setting", "row", "rouge1", "rouge2", "rougeL", "control_error", "n"])
        for rep in reports:
            for name, row in rep.rows().items():
                w.writerow([rep.setting, name, *(f"{row[m]:.4f}" for m in _METRICS), row["n"]])


def write_error_curve_csv(path, curve: Sequence[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["length", "error"])
        w.writerows(curve)
