"""Shared fixtures: tiny corpora, datasets, and scripted service clients."""

import json

import pytest

from searchgain.corpus import Bm25Params, Corpus, Document, build_index
from searchgain.gateway import ScriptedClient
from searchgain.metrics import GoldAnswerSet
from searchgain.qa import QaExample


@pytest.fixture
def tiny_docs():
    """The 3-doc retrieval fixture with hand-computable BM25 scores."""
    return [
        Document("d1", "earthship", "solar house"),
        Document("d2", "solar", "panel market"),
        Document("d3", "jazz", "history"),
    ]


@pytest.fixture
def tiny_index(tiny_docs):
    return build_index(Corpus(tiny_docs), Bm25Params())


@pytest.fixture
def yes_judge():
    return ScriptedClient(default="yes", label="judge-yes")


@pytest.fixture
def no_judge():
    return ScriptedClient(default="no", label="judge-no")


def make_example(qid="q1", question="what is it", golds=("answer",), dataset="unit"):
    return QaExample(qid, question, GoldAnswerSet(list(golds)), dataset=dataset)


def write_corpus_file(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return path


def write_dataset_file(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return path
