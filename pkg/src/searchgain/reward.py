"""Training reward: answer accuracy gain over a fixed retrieval baseline.

The reward for an episode is

    gbr = Acc(answer from the searched context) - Acc(answer from top-k
          retrieval on the raw question)

with both accuracies binary.  The baseline side depends only on the
question, the retriever, k, and the frozen generator, so it is computed
once and cached.  Training sets are pre-filtered: yes/no-style questions
are dropped outright (the containment metrics are unreliable on them),
and so are questions the baseline already answers correctly, leaving
examples where the reward starts at zero and any gain is real signal.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .loop import ANSWER_PROMPT_VERSION, EpisodeError, LoopConfig, Trajectory, render_context_docs, serve_answer
from .metrics import (
    EvalMode,
    JudgeUnavailable,
    JudgeUnparseable,
    generation_accuracy,
    normalize_answer,
)
from .gateway import GatewayError
from .qa import QaExample

logger = logging.getLogger(__name__)

# Golds whose normalized form is a bare yes/no/true/false make containment
# checks meaningless ("not true" contains "true"), so such examples are
# dropped before any service call.
FORBIDDEN_GOLDS = frozenset({"yes", "no", "true", "false"})


def gain_beyond_rag(acc_s3: int, acc_rag: int) -> int:
    """Difference of two binary accuracies; negative values pass through."""
    for name, value in (("acc_s3", acc_s3), ("acc_rag", acc_rag)):
        if value not in (0, 1):
            raise ValueError(f"{name} must be 0 or 1, got {value!r}")
    return acc_s3 - acc_rag


@dataclass(frozen=True)
class RewardRecord:
    qid: str
    acc_s3: int
    acc_rag: int
    gbr: int

    def to_dict(self) -> dict:
        return {"qid": self.qid, "acc_s3": self.acc_s3, "acc_rag": self.acc_rag, "gbr": self.gbr}


class BaselineCache:
    """Persistent map (qid, k, generator identity, prompt version) -> accuracy.

    Backed by an append-only JSONL file when a path is given; an in-memory
    dict otherwise.  Safe for concurrent puts.
    """

    def __init__(self, path: str | Path | None = None):
        self._path = Path(path) if path else None
        self._entries: dict[tuple[str, int, str, str], int] = {}
        self._lock = threading.Lock()
        if self._path and self._path.exists():
            with open(self._path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    row = json.loads(line)
                    self._entries[self._key_of(row)] = int(row["acc"])

    @staticmethod
    def _key_of(row: dict) -> tuple[str, int, str, str]:
        return (row["qid"], int(row["k"]), row["generator"], row["prompt_version"])

    def get(self, qid: str, k: int, generator_identity: str, prompt_version: str) -> int | None:
        return self._entries.get((qid, k, generator_identity, prompt_version))

    def put(self, qid: str, k: int, generator_identity: str, prompt_version: str, acc: int) -> None:
        key = (qid, k, generator_identity, prompt_version)
        row = {
            "qid": qid,
            "k": k,
            "generator": generator_identity,
            "prompt_version": prompt_version,
            "acc": int(acc),
        }
        with self._lock:
            if self._entries.get(key) == int(acc):
                return
            self._entries[key] = int(acc)
            if self._path:
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")

    def __len__(self):
        return len(self._entries)


def rag_context(example: QaExample, retriever, k: int, cfg: LoopConfig) -> str:
    """The baseline context: top-k retrieval on the question, rendered."""
    docs = [scored.document for scored in retriever.retrieve(example.question, k)]
    return render_context_docs(docs, cfg.total_context_token_budget, cfg.token_counter)


def baseline_accuracy(
    example: QaExample,
    retriever,
    generator,
    judge=None,
    *,
    k: int = 3,
    mode: EvalMode = EvalMode.SPAN_THEN_JUDGE,
    cache: BaselineCache | None = None,
    cfg: LoopConfig | None = None,
) -> int:
    """Binary accuracy of the generator over the top-k retrieval context."""
    cfg = cfg or LoopConfig()
    if cache is not None:
        hit = cache.get(example.qid, k, generator.identity, ANSWER_PROMPT_VERSION)
        if hit is not None:
            return hit
    context = rag_context(example, retriever, k, cfg)
    prediction = serve_answer(example, context, generator)
    acc = generation_accuracy(prediction, example.golds, mode, judge)
    if cache is not None:
        cache.put(example.qid, k, generator.identity, ANSWER_PROMPT_VERSION, acc)
    return acc


def is_yes_no_example(example: QaExample) -> bool:
    return any(normalize_answer(gold) in FORBIDDEN_GOLDS for gold in example.golds)


@dataclass
class FilterResult:
    kept: list[QaExample]
    input_count: int
    yes_no_dropped: int
    baseline_solved_dropped: int
    unevaluated: int

    def to_dict(self) -> dict:
        return {
            "input_count": self.input_count,
            "yes_no_dropped": self.yes_no_dropped,
            "baseline_solved_dropped": self.baseline_solved_dropped,
            "unevaluated": self.unevaluated,
            "kept_count": len(self.kept),
            "kept_qids": [example.qid for example in self.kept],
        }


def filter_training_set(
    examples: list[QaExample],
    retriever,
    generator,
    judge=None,
    *,
    k: int = 3,
    mode: EvalMode = EvalMode.SPAN_THEN_JUDGE,
    cache: BaselineCache | None = None,
    cfg: LoopConfig | None = None,
    jobs: int = 1,
) -> FilterResult:
    """Drop yes/no questions, then questions the baseline already solves.

    Yes/no drops happen before any service call.  Examples whose baseline
    cannot be evaluated (generator or judge failure) are excluded from the
    kept set and counted separately rather than guessed at.  Input order
    is preserved in ``kept``.
    """
    cfg = cfg or LoopConfig()
    candidates = []
    yes_no_dropped = 0
    for example in examples:
        if is_yes_no_example(example):
            yes_no_dropped += 1
        else:
            candidates.append(example)

    def evaluate(example: QaExample):
        try:
            return baseline_accuracy(
                example, retriever, generator, judge, k=k, mode=mode, cache=cache, cfg=cfg
            )
        except (EpisodeError, JudgeUnavailable, JudgeUnparseable, GatewayError) as exc:
            logger.warning("excluding %s: baseline not evaluable (%s)", example.qid, exc)
            return None

    if jobs > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(evaluate, candidates))
    else:
        outcomes = [evaluate(example) for example in candidates]

    kept = []
    baseline_solved_dropped = 0
    unevaluated = 0
    for example, acc in zip(candidates, outcomes):
        if acc is None:
            unevaluated += 1
        elif acc == 1:
            baseline_solved_dropped += 1
        else:
            kept.append(example)
    return FilterResult(
        kept=kept,
        input_count=len(examples),
        yes_no_dropped=yes_no_dropped,
        baseline_solved_dropped=baseline_solved_dropped,
        unevaluated=unevaluated,
    )


def score_episode(
    trajectory: Trajectory,
    example: QaExample,
    judge=None,
    *,
    cached_baseline: int,
    mode: EvalMode = EvalMode.SPAN_THEN_JUDGE,
) -> RewardRecord:
    """Reward record for a finished episode against a precomputed baseline."""
    if trajectory.prediction is None:
        raise ValueError(f"episode {example.qid} has no prediction to score")
    acc_s3 = generation_accuracy(trajectory.prediction, example.golds, mode, judge)
    return RewardRecord(
        qid=example.qid,
        acc_s3=acc_s3,
        acc_rag=cached_baseline,
        gbr=gain_beyond_rag(acc_s3, cached_baseline),
    )
