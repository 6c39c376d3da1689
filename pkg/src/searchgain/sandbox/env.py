"""Synthetic retrieval tasks with an oracle generator.

A task is a tiny corpus, a set of required doc keys, a handful of
admissible query templates (template 0 is the question itself), and a
relevance table mapping each template to a full ranking of the corpus.
The oracle generator answers correctly exactly when every required doc is
in the final context, so episode reward needs no text generation.

The action space at each step is finite: pick a selection (no tag, or a
non-empty id subset of the current window up to the selection cap) and
either stop or pick the next query template.  That makes the best
achievable reward exactly computable by exhaustive search, which doubles
as the feasibility check during task generation.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..corpus import Document, ScoredDoc
from ..gateway import GenerationResponse, ScriptedClient
from ..loop import LoopConfig, run_episode
from ..metrics import GoldAnswerSet
from ..qa import QaExample


class InfeasibleTaskError(RuntimeError):
    """Task generation could not satisfy the feasibility constraints."""


@dataclass(frozen=True)
class SyntheticTask:
    qid: str
    question: str
    documents: tuple[Document, ...]
    required_doc_keys: frozenset[str]
    templates: tuple[str, ...]
    relevance: dict[str, tuple[str, ...]]

    def __post_init__(self):
        keys = {doc.doc_key for doc in self.documents}
        if not self.required_doc_keys <= keys:
            raise ValueError("required_doc_keys must be a subset of the corpus")
        if self.templates[0] != self.question:
            raise ValueError("template 0 must be the question itself")
        for template in self.templates:
            if template not in self.relevance:
                raise ValueError(f"template {template!r} missing from the relevance table")

    @property
    def doc_by_key(self) -> dict[str, Document]:
        return {doc.doc_key: doc for doc in self.documents}

    @property
    def distractor_keys(self) -> frozenset[str]:
        return frozenset(doc.doc_key for doc in self.documents) - self.required_doc_keys

    def to_json(self) -> str:
        payload = {
            "qid": self.qid,
            "question": self.question,
            "documents": [
                {"id": d.doc_key, "title": d.title, "text": d.body} for d in self.documents
            ],
            "required_doc_keys": sorted(self.required_doc_keys),
            "templates": list(self.templates),
            "relevance": {t: list(r) for t, r in self.relevance.items()},
        }
        return json.dumps(payload, sort_keys=True, ensure_ascii=True)


class SyntheticIndex:
    """Retrieval adapter: looks queries up in the task's relevance table."""

    def __init__(self, task: SyntheticTask):
        self._task = task
        self._docs = task.doc_by_key

    def retrieve(self, query: str, k: int = 3) -> list[ScoredDoc]:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        ranking = self._task.relevance.get(query, ())
        keys = ranking[:k]
        n = len(keys)
        return [
            ScoredDoc(self._docs[key], float(n - i), i + 1)
            for i, key in enumerate(keys)
        ]


def oracle_accuracy(context_keys, task: SyntheticTask) -> int:
    """1 exactly when every required doc key is present in the context."""
    return int(task.required_doc_keys <= set(context_keys))


def window_keys(task: SyntheticTask, template_index: int, cfg: LoopConfig) -> tuple[str, ...]:
    return task.relevance[task.templates[template_index]][:cfg.k_retrieve]


def baseline_keys(task: SyntheticTask, cfg: LoopConfig) -> tuple[str, ...]:
    """The naive-RAG document set: top-k for the question verbatim."""
    return window_keys(task, 0, cfg)


def synthetic_baseline_accuracy(task: SyntheticTask, cfg: LoopConfig) -> int:
    return oracle_accuracy(baseline_keys(task, cfg), task)


@dataclass(frozen=True)
class ActionCatalog:
    """Enumerated actions for one window size.

    An action is (selection, continuation).  Selections: index 0 is "no
    tag" (the whole window); the rest are non-empty id subsets of the
    window, capped at max_select, ordered by size then lexicographically.
    Continuations: index 0 stops the search; index t+1 re-queries with
    template t.
    """

    window_size: int
    n_templates: int
    max_select: int
    selections: tuple[tuple[int, ...] | None, ...]

    @property
    def n_continuations(self) -> int:
        return 1 + self.n_templates

    @property
    def n_actions(self) -> int:
        return len(self.selections) * self.n_continuations

    def decode(self, action: int) -> tuple[tuple[int, ...] | None, bool, int | None]:
        """Returns (selection ids or None, stop, next template index)."""
        sel_idx, cont_idx = divmod(action, self.n_continuations)
        selection = self.selections[sel_idx]
        if cont_idx == 0:
            return selection, True, None
        return selection, False, cont_idx - 1

    def encode(self, selection: tuple[int, ...] | None, stop: bool, template: int | None) -> int:
        sel_idx = self.selections.index(selection if selection is None else tuple(selection))
        cont_idx = 0 if stop else template + 1
        return sel_idx * self.n_continuations + cont_idx


@lru_cache(maxsize=None)
def action_catalog(window_size: int, n_templates: int, max_select: int) -> ActionCatalog:
    selections: list[tuple[int, ...] | None] = [None]
    for size in range(1, min(max_select, window_size) + 1):
        selections.extend(itertools.combinations(range(1, window_size + 1), size))
    return ActionCatalog(window_size, n_templates, max_select, tuple(selections))


def state_key(task: SyntheticTask, turn: int, template_index: int, collected) -> tuple:
    return (task.qid, turn, template_index, tuple(sorted(collected)))


def rollout_episode(task: SyntheticTask, cfg: LoopConfig, policy, rng):
    """Sample one episode with the structured fast driver.

    Mirrors the loop engine's semantics exactly (verified against the text
    path in the test suite): the first window comes from the question
    verbatim, a no-tag selection contributes the whole window, and at most
    max_turns search rounds follow turn 0.

    Returns (steps, final_keys, stop_reason) where steps is a list of
    (state_key, n_actions, action, log_prob) tuples.
    """
    steps: list[tuple[tuple, int, int, float]] = []
    collected: list[str] = []
    collected_set: set[str] = set()
    turn = 0
    template_index = 0
    stop_reason = ""
    while True:
        window = window_keys(task, template_index, cfg)
        catalog = action_catalog(len(window), len(task.templates), cfg.max_select)
        state = state_key(task, turn, template_index, collected_set)
        action, log_prob = policy.sample(state, catalog.n_actions, rng)
        steps.append((state, catalog.n_actions, action, log_prob))
        selection, stop, next_template = catalog.decode(action)
        contribution = window if selection is None else [window[i - 1] for i in selection]
        for key in contribution:
            if key not in collected_set:
                collected_set.add(key)
                collected.append(key)
        if stop:
            stop_reason = "policy_complete"
            break
        if turn >= cfg.max_turns:
            stop_reason = "turn_limit"
            break
        turn += 1
        template_index = next_template
    return steps, tuple(collected), stop_reason


class _ActionScriptClient:
    """Feeds pre-decided actions to the real loop engine as tag text."""

    identity = "sandbox-policy"

    def __init__(self, task: SyntheticTask, cfg: LoopConfig, policy, rng):
        self._task = task
        self._cfg = cfg
        self._policy = policy
        self._rng = rng
        self._turn = 0
        self._template_index = 0
        self._collected: set[str] = set()
        self.steps: list[tuple[tuple, int, int, float]] = []

    def generate(self, request) -> GenerationResponse:
        task, cfg = self._task, self._cfg
        window = window_keys(task, self._template_index, cfg)
        catalog = action_catalog(len(window), len(task.templates), cfg.max_select)
        state = state_key(task, self._turn, self._template_index, self._collected)
        action, log_prob = self._policy.sample(state, catalog.n_actions, self._rng)
        self.steps.append((state, catalog.n_actions, action, log_prob))
        selection, stop, next_template = catalog.decode(action)

        contribution = window if selection is None else [window[i - 1] for i in selection]
        self._collected.update(contribution)
        parts = []
        if selection is not None:
            parts.append(f"<important_info>{list(selection)}</important_info>")
        if stop:
            parts.append("<search_complete>True</search_complete>")
        else:
            parts.append("<search_complete>False</search_complete>")
            next_query = task.templates[next_template]
            parts.append(f"<query>{json.dumps({'query': next_query})}</query>")
            self._turn += 1
            self._template_index = next_template
        return GenerationResponse("\n".join(parts))


def task_example(task: SyntheticTask) -> QaExample:
    return QaExample(task.qid, task.question, GoldAnswerSet(["synthetic"]), dataset="synthetic")


def run_text_episode(task: SyntheticTask, cfg: LoopConfig, policy, rng):
    """Roll one episode through the real loop engine and tag grammar.

    Slower than rollout_episode but exercises the full text path; the two
    must agree on states, actions, final context, and stop reason.
    """
    client = _ActionScriptClient(task, cfg, policy, rng)
    generator = ScriptedClient(default="", label="oracle-generator")
    trajectory = run_episode(task_example(task), cfg, client, SyntheticIndex(task), generator)
    final_keys = tuple(doc.doc_key for doc in trajectory.final_context)
    return client.steps, final_keys, trajectory.stop_reason, trajectory


def optimal_accuracy(task: SyntheticTask, cfg: LoopConfig) -> int:
    """Best achievable oracle accuracy over every policy action sequence.

    Exhaustive search with memoization on (turn, template, required docs
    collected); distractor membership never affects the oracle or the
    dynamics, so the projection is exact.
    """
    required = frozenset(task.required_doc_keys)
    n_templates = len(task.templates)

    memo: dict[tuple, int] = {}

    def visit(turn: int, template_index: int, have: frozenset[str]) -> int:
        key = (turn, template_index, have)
        if key in memo:
            return memo[key]
        window = window_keys(task, template_index, cfg)
        visible = [k for k in window if k in required]
        additions: set[frozenset[str]] = {frozenset(visible)}
        for size in range(0, min(cfg.max_select, len(visible)) + 1):
            for combo in itertools.combinations(visible, size):
                additions.add(frozenset(combo))
        best = 0
        for addition in additions:
            have_next = have | addition
            best = max(best, int(have_next == required))
            if best and turn >= cfg.max_turns:
                break
            if turn < cfg.max_turns:
                for next_template in range(n_templates):
                    best = max(best, visit(turn + 1, next_template, have_next))
                    if best:
                        break
            if best:
                break
        memo[key] = best
        return best

    return visit(0, 0, frozenset())


def optimal_gbr(task: SyntheticTask, cfg: LoopConfig) -> int:
    """Best achievable gain over the naive-RAG baseline."""
    return optimal_accuracy(task, cfg) - synthetic_baseline_accuracy(task, cfg)


def make_synthetic_task(
    seed: int,
    n_docs: int = 10,
    n_required: int = 2,
    n_query_templates: int = 4,
    cfg: LoopConfig | None = None,
) -> SyntheticTask:
    """Deterministically generate a feasible task.

    Every required doc is surfaced within the top k_retrieve of at least
    one template, and exhaustive search confirms a winning strategy exists
    within the loop bounds.  The same seed always yields the same task.
    """
    cfg = cfg or LoopConfig()
    if n_required > n_docs:
        raise ValueError("n_required cannot exceed n_docs")
    if n_required > cfg.max_turns * cfg.max_select:
        raise ValueError(
            f"n_required={n_required} exceeds max_turns*max_select="
            f"{cfg.max_turns * cfg.max_select}"
        )
    if n_query_templates < 1:
        raise ValueError("n_query_templates must be >= 1")

    doc_keys = [f"doc{i:03d}" for i in range(n_docs)]
    documents = tuple(
        Document(
            key,
            f"Synthetic Doc {i}",
            f"Body of synthetic document {i} for task seed {seed}.",
        )
        for i, key in enumerate(doc_keys)
    )
    question = f"synthetic question {seed}"
    templates = tuple(
        [question] + [f"query variant {v} for question {seed}" for v in range(1, n_query_templates)]
    )

    for attempt in range(200):
        rng = np.random.default_rng([seed, attempt])
        required = frozenset(rng.choice(doc_keys, size=n_required, replace=False).tolist())
        relevance: dict[str, tuple[str, ...]] = {}
        rankings = []
        for template in templates:
            ranking = [doc_keys[i] for i in rng.permutation(n_docs)]
            rankings.append(ranking)
        # Guarantee each required doc is surfaced in some template's top-k.
        k = cfg.k_retrieve
        for key in sorted(required):
            if any(key in ranking[:k] for ranking in rankings):
                continue
            ranking = rankings[int(rng.integers(len(rankings)))]
            slot = int(rng.integers(min(k, n_docs)))
            current = ranking.index(key)
            ranking[current], ranking[slot] = ranking[slot], ranking[current]
        relevance = {template: tuple(ranking) for template, ranking in zip(templates, rankings)}
        task = SyntheticTask(
            qid=f"synth-{seed}",
            question=question,
            documents=documents,
            required_doc_keys=required,
            templates=templates,
            relevance=relevance,
        )
        if optimal_accuracy(task, cfg) == 1:
            return task
    raise InfeasibleTaskError(
        f"could not generate a feasible task for seed {seed} within the loop bounds"
    )


def make_training_tasks(
    n_tasks: int,
    cfg: LoopConfig,
    n_docs: int = 10,
    n_required: int = 2,
    n_query_templates: int = 4,
    seed_start: int = 0,
) -> list[SyntheticTask]:
    """Feasible tasks whose naive-RAG baseline fails (accuracy 0)."""
    tasks: list[SyntheticTask] = []
    seed = seed_start
    while len(tasks) < n_tasks:
        task = make_synthetic_task(seed, n_docs, n_required, n_query_templates, cfg)
        if synthetic_baseline_accuracy(task, cfg) == 0:
            tasks.append(task)
        seed += 1
        if seed - seed_start > 100 * n_tasks + 100:
            raise InfeasibleTaskError("could not collect enough baseline-failing tasks")
    return tasks
