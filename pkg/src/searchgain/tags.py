"""The tag grammar spoken between the loop engine and the search policy.

Five tags make up the wire format: ``<question>``, ``<information>``,
``<important_info>``, ``<search_complete>``, and ``<query>``.  Retrieved
documents are rendered inside an information block one per line as

    Doc 3 (Title: "Some Title") body text ...

and the policy replies with an optional ``<important_info>`` selection (a
bracketed integer list naming doc ids of the most recent window), a
mandatory ``<search_complete>`` decision, and, when the search continues,
a ``<query>`` tag whose content is a JSON object with a ``query`` field
(plain text is accepted as a fallback).

Extraction of the final document set from a transcript follows three
rules:

1. An ``<important_info>`` selection applies only to the information block
   it directly follows; within one block the first selection is
   authoritative and later ones are ignored.
2. A block with no selection contributes all of its documents.
3. Documents are deduplicated by (title, body) content, keeping the first
   occurrence, and the original document order is preserved.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

INFORMATION_TAG = "information"
IMPORTANT_INFO_TAG = "important_info"
SEARCH_COMPLETE_TAG = "search_complete"
QUERY_TAG = "query"
QUESTION_TAG = "question"

_INFORMATION_RE = re.compile(r"<information>(.*?)</information>", re.DOTALL)
_IMPORTANT_RE = re.compile(r"<important_info>(.*?)</important_info>", re.DOTALL)
_COMPLETE_RE = re.compile(r"<search_complete>(.*?)</search_complete>", re.DOTALL)
_QUERY_RE = re.compile(r"<query>(.*?)</query>", re.DOTALL)

# Doc header: index, then a parenthesized title that may be double-quoted.
_DOC_HEADER_RE = re.compile(r'Doc\s+(\d+)\s+\(\s*Title:\s*(?:"((?:[^"\\]|\\.)*)"|([^)]*?))\s*\)')

_INT_RE = re.compile(r"\d+")

_TRUE_WORDS = {"true", "1"}
_FALSE_WORDS = {"false", "0"}


class TagProtocolError(ValueError):
    """Base class for policy-output grammar errors."""


class MissingStopDecision(TagProtocolError):
    """The policy output carries no parsable <search_complete> decision."""


class MissingQuery(TagProtocolError):
    """The policy chose to continue but provided no usable <query>."""


class SelectionViolation(TagProtocolError):
    """Selection ids fall outside the window or exceed the selection cap.

    Carries ``repaired``, a PolicyTurn with out-of-window ids dropped and
    the remainder truncated to the cap, so callers can log and continue.
    """

    def __init__(self, message: str, repaired: "PolicyTurn", invalid_ids: list[int]):
        super().__init__(message)
        self.repaired = repaired
        self.invalid_ids = invalid_ids


@dataclass
class PolicyTurn:
    """One parsed policy response.

    selected_ids is None when no <important_info> tag was present (which
    downstream means "keep the whole window"), and may be an empty list
    when the tag was present but named no ids.
    """

    selected_ids: list[int] | None
    search_complete: bool
    next_query: str | None


@dataclass
class ParsedDoc:
    """A document as it appears inside an information block."""

    index: int
    title: str
    text: str


@dataclass
class InformationBlock:
    docs: list[ParsedDoc]


@dataclass
class ImportantInfo:
    ids: list[int]


@dataclass
class Transcript:
    """Ordered information blocks and selections parsed from raw text."""

    events: list[InformationBlock | ImportantInfo] = field(default_factory=list)


def _collapse(text: str) -> str:
    return " ".join(text.split())


def render_doc_lines(docs, start_index: int = 1) -> str:
    """Render documents one per line, numbered from start_index.

    Titles and bodies have whitespace runs collapsed so each document
    occupies exactly one line.
    """
    lines = []
    for i, doc in enumerate(docs, start=start_index):
        lines.append(f'Doc {i} (Title: "{_collapse(doc.title)}") {_collapse(doc.body)}')
    return "\n".join(lines)


def render_information_block(docs, start_index: int = 1) -> str:
    """Wrap rendered doc lines in an <information> block."""
    if not docs:
        raise ValueError("cannot render an information block with no documents")
    return f"<information>\n{render_doc_lines(docs, start_index)}\n</information>"


def parse_doc_lines(block_text: str) -> list[ParsedDoc]:
    """Parse doc entries out of an information block's inner text.

    Tolerates extra spacing and unquoted titles.  A document's text runs
    from its header to the next header (or the end of the block) and is
    whitespace-collapsed.
    """
    headers = list(_DOC_HEADER_RE.finditer(block_text))
    docs: list[ParsedDoc] = []
    for pos, match in enumerate(headers):
        end = headers[pos + 1].start() if pos + 1 < len(headers) else len(block_text)
        title = match.group(2) if match.group(2) is not None else match.group(3)
        body = block_text[match.end():end]
        docs.append(ParsedDoc(int(match.group(1)), _collapse(title), _collapse(body)))
    return docs


def _parse_selection_ids(inner: str) -> list[int]:
    ids: list[int] = []
    for raw in _INT_RE.findall(inner):
        value = int(raw)
        if value not in ids:
            ids.append(value)
    return ids


def parse_policy_turn(
    raw: str,
    window_size: int | None = None,
    max_select: int | None = None,
) -> PolicyTurn:
    """Parse one policy response into a PolicyTurn.

    Parsing is total: every input either yields a PolicyTurn or raises one
    of MissingStopDecision, MissingQuery, or SelectionViolation.  The first
    occurrence of each tag wins.  A <query> accompanying search_complete =
    True is ignored.  When window_size / max_select are provided, selection
    ids are validated against them; violations raise SelectionViolation
    carrying a repaired turn.
    """
    complete_match = _COMPLETE_RE.search(raw)
    if complete_match is None:
        raise MissingStopDecision("no <search_complete> tag in policy output")
    decision_word = complete_match.group(1).strip().lower()
    if decision_word in _TRUE_WORDS:
        complete = True
    elif decision_word in _FALSE_WORDS:
        complete = False
    else:
        raise MissingStopDecision(
            f"unrecognized <search_complete> value {complete_match.group(1).strip()!r}"
        )

    important_match = _IMPORTANT_RE.search(raw)
    selected_ids = _parse_selection_ids(important_match.group(1)) if important_match else None

    next_query: str | None = None
    if not complete:
        query_match = _QUERY_RE.search(raw)
        if query_match is None:
            raise MissingQuery("search continues but no <query> tag present")
        next_query = _extract_query_text(query_match.group(1))
        if not next_query:
            raise MissingQuery("search continues but the <query> tag is empty")

    turn = PolicyTurn(selected_ids, complete, next_query)

    if selected_ids is not None and window_size is not None:
        valid = [i for i in selected_ids if 1 <= i <= window_size]
        invalid = [i for i in selected_ids if i not in valid]
        capped = valid[:max_select] if max_select is not None else valid
        if invalid or len(valid) != len(capped):
            repaired = PolicyTurn(capped, complete, next_query)
            parts = []
            if invalid:
                parts.append(f"ids {invalid} outside window 1..{window_size}")
            if len(valid) != len(capped):
                parts.append(f"{len(valid)} ids exceed the cap of {max_select}")
            raise SelectionViolation("; ".join(parts), repaired, invalid)
    return turn


def _extract_query_text(inner: str) -> str:
    """Query content: JSON object with a "query" field, else plain text."""
    text = inner.strip()
    try:
        payload = json.loads(text)
    except (json.JSONDecodeError, ValueError):
        return text
    if isinstance(payload, dict) and isinstance(payload.get("query"), str):
        return payload["query"].strip()
    if isinstance(payload, str):
        return payload.strip()
    return text


def parse_transcript(text: str) -> Transcript:
    """Split raw transcript text into information blocks and selections."""
    events: list[tuple[int, InformationBlock | ImportantInfo]] = []
    for match in _INFORMATION_RE.finditer(text):
        events.append((match.start(), InformationBlock(parse_doc_lines(match.group(1)))))
    for match in _IMPORTANT_RE.finditer(text):
        events.append((match.start(), ImportantInfo(_parse_selection_ids(match.group(1)))))
    events.sort(key=lambda item: item[0])
    return Transcript([event for _, event in events])


def extract_selected_documents(transcript: Transcript) -> list[ParsedDoc]:
    """Apply the selection rules to a parsed transcript.

    Returns the final document list in original order, deduplicated by
    (title, text) content with the first occurrence kept.  Selection ids
    with no matching doc index in their block are skipped with a warning;
    a selection that precedes any information block is ignored likewise.
    """
    contributions: list[list[ParsedDoc]] = []
    block: InformationBlock | None = None
    block_decided = False
    for event in transcript.events:
        if isinstance(event, InformationBlock):
            block = event
            block_decided = False
            contributions.append(list(event.docs))
        else:
            if block is None:
                logger.warning("important_info %s precedes any information block; ignored", event.ids)
                continue
            if block_decided:
                logger.warning(
                    "extra important_info %s for the same block; first selection kept", event.ids
                )
                continue
            block_decided = True
            block_indices = {doc.index for doc in block.docs}
            for doc_id in event.ids:
                if doc_id not in block_indices:
                    logger.warning("important_info id %d has no doc in its block; skipped", doc_id)
            contributions[-1] = [doc for doc in block.docs if doc.index in event.ids]

    result: list[ParsedDoc] = []
    seen: set[tuple[str, str]] = set()
    for docs in contributions:
        for doc in docs:
            key = (doc.title, doc.text)
            if key in seen:
                continue
            seen.add(key)
            result.append(doc)
    return result


def extract_from_text(text: str) -> list[ParsedDoc]:
    """Convenience: parse raw transcript text and extract in one call."""
    return extract_selected_documents(parse_transcript(text))
