"""Binary answer-correctness metrics.

All checks operate on normalized strings: lowercase, punctuation removed
(ASCII punctuation plus anything in a Unicode P category), the articles
a/an/the dropped, and whitespace collapsed.  Normalization is idempotent.

``generation_accuracy`` composes the two checks: a cheap token-span
containment test and, only when that fails, an LLM judge asked whether any
golden answer is contained in the response.  The judge never silently
fails; transport or parse problems raise so callers can exclude the
example instead of counting it wrong.
"""

from __future__ import annotations

import re
import string
import unicodedata
from dataclasses import dataclass
from enum import Enum
from importlib import resources

from .gateway import GatewayError, GenerationRequest

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_ASCII_PUNCT = set(string.punctuation)

JUDGE_PROMPT_VERSION = "judge-v1"
JUDGE_REPLY_SCAN_TOKENS = 10
_JUDGE_MAX_NEW_TOKENS = 16


def _is_punct(ch: str) -> bool:
    return ch in _ASCII_PUNCT or unicodedata.category(ch).startswith("P")


def normalize_answer(raw: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    text = raw.lower()
    text = "".join(ch for ch in text if not _is_punct(ch))
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


@dataclass(frozen=True)
class Prediction:
    text: str


class GoldAnswerSet:
    """A non-empty set of acceptable answer strings.

    Every entry must survive normalization; an entry that normalizes to the
    empty string can never be matched and is rejected up front.
    """

    def __init__(self, answers):
        answers = tuple(answers)
        if not answers:
            raise ValueError("golden answers must be non-empty")
        for answer in answers:
            if not normalize_answer(answer):
                raise ValueError(f"golden answer {answer!r} normalizes to the empty string")
        self.answers = answers

    def __iter__(self):
        return iter(self.answers)

    def __len__(self):
        return len(self.answers)

    def __eq__(self, other):
        return isinstance(other, GoldAnswerSet) and self.answers == other.answers

    def __repr__(self):
        return f"GoldAnswerSet({list(self.answers)!r})"


class EvalMode(str, Enum):
    SPAN_THEN_JUDGE = "span_then_judge"
    JUDGE_ONLY = "judge_only"
    SPAN_ONLY = "span_only"
    EXACT_MATCH = "exact_match"


class JudgeUnavailable(RuntimeError):
    """The judge endpoint failed; the example must be excluded, not zeroed."""


class JudgeUnparseable(RuntimeError):
    """The judge replied with neither yes nor no in its leading tokens."""


def _contains_token_span(haystack: list[str], needle: list[str]) -> bool:
    n = len(needle)
    return any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def span_check(prediction: Prediction, golds: GoldAnswerSet) -> int:
    """1 if any normalized gold occurs as a contiguous token span."""
    pred_tokens = normalize_answer(prediction.text).split()
    for gold in golds:
        if _contains_token_span(pred_tokens, normalize_answer(gold).split()):
            return 1
    return 0


def exact_match(prediction: Prediction, golds: GoldAnswerSet) -> int:
    """1 if the normalized prediction equals any normalized gold exactly."""
    pred = normalize_answer(prediction.text)
    return int(any(pred == normalize_answer(gold) for gold in golds))


def _load_prompt(name: str) -> str:
    text = resources.files("searchgain").joinpath(f"prompts/{name}").read_text(encoding="utf-8")
    return text.rstrip("\n")


_JUDGE_TEMPLATE: str | None = None


def render_judge_prompt(prediction: Prediction, golds: GoldAnswerSet) -> str:
    """Fill the judge template; golds render as a bracketed quoted list."""
    global _JUDGE_TEMPLATE
    if _JUDGE_TEMPLATE is None:
        _JUDGE_TEMPLATE = _load_prompt("judge.txt")
    rendered_golds = repr(list(golds.answers))
    return _JUDGE_TEMPLATE.replace("{response}", prediction.text).replace(
        "{golden_answers}", rendered_golds
    )


def parse_judge_reply(reply: str) -> int:
    """Scan the first few tokens for a yes/no verdict.

    The first occurrence of "yes" or "no" (case-insensitive, punctuation
    stripped) within the leading tokens decides; anything else raises
    JudgeUnparseable.
    """
    for token in reply.split()[:JUDGE_REPLY_SCAN_TOKENS]:
        word = token.strip(string.punctuation).lower()
        if word == "yes":
            return 1
        if word == "no":
            return 0
    raise JudgeUnparseable(f"no yes/no verdict in judge reply {reply!r}")


def judge_check(prediction: Prediction, golds: GoldAnswerSet, judge) -> int:
    """Ask the judge whether any gold is contained in the prediction."""
    request = GenerationRequest(
        prompt=render_judge_prompt(prediction, golds),
        max_new_tokens=_JUDGE_MAX_NEW_TOKENS,
        temperature=0.0,
    )
    try:
        response = judge.generate(request)
    except GatewayError as exc:
        raise JudgeUnavailable(f"judge call failed: {exc}") from exc
    return parse_judge_reply(response.text)


def generation_accuracy(
    prediction: Prediction,
    golds: GoldAnswerSet,
    mode: EvalMode = EvalMode.SPAN_THEN_JUDGE,
    judge=None,
) -> int:
    """Binary correctness under the configured mode.

    span_then_judge short-circuits: the judge is consulted only when the
    span check fails, so a span hit never spends a judge call.
    """
    mode = EvalMode(mode)
    if mode is EvalMode.EXACT_MATCH:
        return exact_match(prediction, golds)
    if mode is EvalMode.SPAN_ONLY:
        return span_check(prediction, golds)
    if mode is EvalMode.JUDGE_ONLY:
        if judge is None:
            raise ValueError("judge_only mode requires a judge client")
        return judge_check(prediction, golds, judge)
    if span_check(prediction, golds):
        return 1
    if judge is None:
        raise ValueError("span_then_judge mode requires a judge client when the span check fails")
    return judge_check(prediction, golds, judge)
