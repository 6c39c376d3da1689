"""The multi-turn search episode engine.

An episode begins with a retrieval for the question verbatim.  After every
information window the policy is consulted once; it may select documents
from that window, must decide whether the search is complete, and supplies
the next query when it continues.  The final document context is whatever
the tag-extraction rules yield from the full transcript, so an episode
that stops immediately and selects nothing ends up with exactly the
naive top-k retrieval.

Episodes never abort a batch on policy misbehavior: a malformed policy
response is retried once, and a second consecutive failure ends the
episode with stop_reason = "policy_error".
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

from .corpus import Document
from .gateway import GatewayError, GenerationRequest
from .metrics import Prediction
from .qa import QaExample
from . import tags

logger = logging.getLogger(__name__)

STOP_POLICY_COMPLETE = "policy_complete"
STOP_TURN_LIMIT = "turn_limit"
STOP_POLICY_ERROR = "policy_error"

SEARCHER_PROMPT_VERSION = "searcher-v1"
ANSWER_PROMPT_VERSION = "answer-v1"

TOKENS_PER_WORD = 1.3
ANSWER_MAX_NEW_TOKENS = 256


def approx_token_count(text: str) -> int:
    """Whitespace word count scaled by 1.3, rounded up."""
    return math.ceil(len(text.split()) * TOKENS_PER_WORD)


@dataclass
class LoopConfig:
    k_retrieve: int = 3
    max_select: int = 3
    max_turns: int = 3
    per_turn_doc_token_budget: int = 1400
    total_context_token_budget: int = 8000
    policy_max_new_tokens: int = 512
    policy_temperature: float = 0.0
    token_counter: Callable[[str], int] = approx_token_count

    def __post_init__(self):
        for name in ("k_retrieve", "max_select", "max_turns",
                     "per_turn_doc_token_budget", "total_context_token_budget"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class Turn:
    """One search round: the query, the rendered window, the contribution.

    ``selected`` is the window's contribution to the final context under
    the extraction rules (the whole window when the policy named nothing).
    """

    query: str
    retrieved: list[Document]
    selected: list[Document]
    stop: bool


@dataclass
class Trajectory:
    question: QaExample
    turns: list[Turn]
    final_context: list[Document]
    prediction: Prediction | None
    transcript: str
    stop_reason: str
    policy_faults: list[str] = field(default_factory=list)


class EpisodeError(RuntimeError):
    """A generator failure during an episode, tagged with the episode id."""

    def __init__(self, qid: str, cause: Exception):
        super().__init__(f"episode {qid}: {cause}")
        self.qid = qid


_TEMPLATE_CACHE: dict[str, str] = {}


def _template(name: str) -> str:
    if name not in _TEMPLATE_CACHE:
        text = resources.files("searchgain").joinpath(f"prompts/{name}").read_text(encoding="utf-8")
        _TEMPLATE_CACHE[name] = text.rstrip("\n")
    return _TEMPLATE_CACHE[name]


def render_searcher_prompt(question: str, initial_doc_lines: str) -> str:
    return (
        _template("searcher.txt")
        .replace("{question}", question)
        .replace("{initial_search_result}", initial_doc_lines)
    )


def render_answer_prompt(question: str, context: str) -> str:
    return (
        _template("answer.txt")
        .replace("{context}", context)
        .replace("{question}", question)
    )


def fit_docs_to_turn_budget(docs: list[Document], budget: int, counter) -> list[Document]:
    """Greedily keep whole documents within the per-turn token budget.

    The first document is always shown; if it alone exceeds the budget its
    body is trimmed by words to fit.
    """
    kept: list[Document] = []
    used = 0
    for doc in docs:
        line = tags.render_doc_lines([doc])
        cost = counter(line)
        if kept and used + cost > budget:
            break
        if not kept and cost > budget:
            kept.append(_trim_doc(doc, budget, counter))
            used = budget
            continue
        kept.append(doc)
        used += cost
    return kept


def _trim_doc(doc: Document, budget: int, counter) -> Document:
    words = doc.body.split()
    lo, hi = 1, len(words)
    best = 1
    while lo <= hi:
        mid = (lo + hi) // 2
        candidate = Document(doc.doc_key, doc.title, " ".join(words[:mid]))
        if counter(tags.render_doc_lines([candidate])) <= budget:
            best = mid
            lo = mid + 1
        else:
            hi = mid - 1
    return Document(doc.doc_key, doc.title, " ".join(words[:best]))


def render_context_docs(docs: list[Document], budget: int, counter=approx_token_count) -> str:
    """Render the final context, truncated at a document boundary.

    Documents are numbered from 1.  Rendering stops before the first
    document that would push the running token count past the budget; a
    document is never split.
    """
    lines: list[str] = []
    used = 0
    index = 1
    for doc in docs:
        line = tags.render_doc_lines([doc], start_index=index)
        cost = counter(line)
        if used + cost > budget:
            break
        lines.append(line)
        used += cost
        index += 1
    return "\n".join(lines)


def assemble_context(trajectory: Trajectory, cfg: LoopConfig) -> str:
    return render_context_docs(
        trajectory.final_context, cfg.total_context_token_budget, cfg.token_counter
    )


def serve_answer(example: QaExample, context: str, generator) -> Prediction:
    """One generator call over the assembled context."""
    request = GenerationRequest(
        prompt=render_answer_prompt(example.question, context),
        max_new_tokens=ANSWER_MAX_NEW_TOKENS,
        temperature=0.0,
    )
    try:
        response = generator.generate(request)
    except GatewayError as exc:
        raise EpisodeError(example.qid, exc) from exc
    return Prediction(response.text)


def _consult_policy(policy, prompt: str, cfg: LoopConfig, window_size: int, faults: list[str]):
    """One policy consultation with a single retry on malformed output.

    Returns (turn, raw_text) or (None, None) after two consecutive
    malformed responses.  Selection violations are repaired, logged, and
    do not count as malformed.
    """
    request = GenerationRequest(
        prompt=prompt,
        max_new_tokens=cfg.policy_max_new_tokens,
        temperature=cfg.policy_temperature,
    )
    for attempt in (1, 2):
        response = policy.generate(request)
        try:
            turn = tags.parse_policy_turn(
                response.text, window_size=window_size, max_select=cfg.max_select
            )
        except tags.SelectionViolation as exc:
            logger.warning("selection repaired: %s", exc)
            return exc.repaired, response.text
        except (tags.MissingStopDecision, tags.MissingQuery) as exc:
            faults.append(f"attempt {attempt}: {exc}")
            logger.warning("malformed policy turn (attempt %d): %s", attempt, exc)
            continue
        return turn, response.text
    return None, None


def run_episode(example: QaExample, cfg: LoopConfig, policy, retriever, generator) -> Trajectory:
    """Run one search episode and serve the final answer.

    The number of retrieval calls, policy consultations, and recorded
    turns are all equal (malformed-output retries aside).  The final
    context is computed by the tag-extraction rules over the transcript.
    """
    faults: list[str] = []
    turns: list[Turn] = []
    exchange_parts: list[str] = []
    rendered_map: dict[tuple[str, str], Document] = {}

    current_query = example.question
    base_prompt = ""
    transcript_head = ""
    stop_reason = STOP_POLICY_ERROR

    while True:
        scored = retriever.retrieve(current_query, cfg.k_retrieve)
        window = fit_docs_to_turn_budget(
            [hit.document for hit in scored], cfg.per_turn_doc_token_budget, cfg.token_counter
        )
        for doc in window:
            rendered_map.setdefault(doc.content_key(), doc)
        doc_lines = tags.render_doc_lines(window) if window else ""
        block_text = f"<information>\n{doc_lines}\n</information>"

        if not turns:
            base_prompt = render_searcher_prompt(example.question, doc_lines)
            transcript_head = (
                f"<question>\n{example.question}\n</question>\n\n{block_text}"
            )
        else:
            exchange_parts.append(block_text)

        prompt = base_prompt + ("\n\n" if exchange_parts else "")
        prompt += "\n\n".join(exchange_parts)
        parsed, raw_text = _consult_policy(policy, prompt, cfg, len(window), faults)

        if parsed is None:
            turns.append(Turn(current_query, window, list(window), False))
            stop_reason = STOP_POLICY_ERROR
            break

        exchange_parts.append(raw_text)
        if parsed.selected_ids is None:
            contribution = list(window)
        else:
            contribution = [window[i - 1] for i in parsed.selected_ids]
        turns.append(Turn(current_query, window, contribution, parsed.search_complete))

        if parsed.search_complete:
            stop_reason = STOP_POLICY_COMPLETE
            break
        if len(turns) > cfg.max_turns:
            stop_reason = STOP_TURN_LIMIT
            break
        current_query = parsed.next_query

    transcript = transcript_head
    if exchange_parts:
        transcript += "\n\n" + "\n\n".join(exchange_parts)

    extracted = tags.extract_from_text(transcript)
    final_context: list[Document] = []
    for parsed_doc in extracted:
        doc = rendered_map.get((parsed_doc.title, parsed_doc.text))
        if doc is None:
            logger.warning(
                "extracted doc %r not traceable to a rendered window; skipped", parsed_doc.title
            )
            continue
        final_context.append(doc)

    trajectory = Trajectory(
        question=example,
        turns=turns,
        final_context=final_context,
        prediction=None,
        transcript=transcript,
        stop_reason=stop_reason,
        policy_faults=faults,
    )
    context_text = assemble_context(trajectory, cfg)
    trajectory.prediction = serve_answer(example, context_text, generator)
    return trajectory


def trajectory_record(trajectory: Trajectory, cfg: LoopConfig) -> dict:
    """A JSON-serializable episode record for line-delimited persistence."""
    return {
        "qid": trajectory.question.qid,
        "dataset": trajectory.question.dataset,
        "config": {
            "k_retrieve": cfg.k_retrieve,
            "max_select": cfg.max_select,
            "max_turns": cfg.max_turns,
            "per_turn_doc_token_budget": cfg.per_turn_doc_token_budget,
            "total_context_token_budget": cfg.total_context_token_budget,
        },
        "turns": [
            {
                "query": turn.query,
                "retrieved": [doc.doc_key for doc in turn.retrieved],
                "selected": [doc.doc_key for doc in turn.selected],
                "stop": turn.stop,
            }
            for turn in trajectory.turns
        ],
        "stop_reason": trajectory.stop_reason,
        "final_context": [doc.doc_key for doc in trajectory.final_context],
        "prediction": trajectory.prediction.text if trajectory.prediction else None,
    }
