"""Line-delimited JSON helpers shared by corpus, template and dataset files."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Callable, Iterable, TypeVar

T = TypeVar("T")


class RecordError(ValueError):
    """One or more lines of a JSONL file failed validation.

    ``errors`` is a list of ``(line_number, message)`` with 1-based line numbers.
    """

    def __init__(self, path: str | os.PathLike, errors: list[tuple[int, str]]):
        self.path = str(path)
        self.errors = errors
        lines = "; ".join(f"line {n}: {msg}" for n, msg in errors[:10])
        more = f" (+{len(errors) - 10} more)" if len(errors) > 10 else ""
        super().__init__(f"{self.path}: {len(errors)} bad record(s): {lines}{more}")


def write_jsonl(path: str | os.PathLike, records: Iterable[dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True))
            f.write("\n")
            n += 1
    os.replace(tmp, path)
    return n


def append_jsonl(path: str | os.PathLike, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: str | os.PathLike, parse: Callable[[Any], T] = lambda x: x) -> list[T]:
    """Read every line, collecting all failures before raising :class:`RecordError`."""
    out: list[T] = []
    errors: list[tuple[int, str]] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(parse(json.loads(line)))
            except json.JSONDecodeError as e:
                errors.append((lineno, f"invalid JSON ({e.msg})"))
            except (KeyError, TypeError, ValueError) as e:
                errors.append((lineno, str(e) or type(e).__name__))
    if errors:
        raise RecordError(path, errors)
    return out
