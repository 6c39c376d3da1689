"""QA dataset records and loading.

Dataset files are UTF-8 JSONL with one example per line carrying ``id``,
``question``, and ``golden_answers`` (a list of strings).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import GoldAnswerSet


@dataclass(frozen=True)
class QaExample:
    qid: str
    question: str
    golds: GoldAnswerSet
    dataset: str = ""

    def __post_init__(self):
        if not self.qid:
            raise ValueError("qid must be non-empty")
        if not self.question.strip():
            raise ValueError(f"example {self.qid!r}: empty question")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


def load_dataset(path: str | Path, dataset: str | None = None) -> list[QaExample]:
    """Load a JSONL dataset; qids must be unique within the file.

    The dataset tag defaults to the file's stem.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    tag = dataset if dataset is not None else path.stem
    examples: list[QaExample] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"invalid JSON ({exc.msg})", line_no) from exc
            try:
                qid = str(record["id"])
                question = record["question"]
                answers = record["golden_answers"]
            except (KeyError, TypeError) as exc:
                raise DatasetFormatError(f"missing field ({exc})", line_no) from exc
            if not isinstance(answers, list) or not all(isinstance(a, str) for a in answers):
                raise DatasetFormatError("golden_answers must be a list of strings", line_no)
            if qid in seen:
                raise DatasetFormatError(
                    f"duplicate id {qid!r} (first seen on line {seen[qid]})", line_no
                )
            seen[qid] = line_no
            try:
                examples.append(QaExample(qid, question, GoldAnswerSet(answers), tag))
            except ValueError as exc:
                raise DatasetFormatError(str(exc), line_no) from exc
    return examples
