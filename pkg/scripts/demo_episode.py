#!/usr/bin/env python3
"""Run one fully scripted search episode offline and print what happened.

Builds a six-document corpus, scripts a two-round search policy (rewrite
the query, then select the two documents that name the year), and scores
the episode against the one-shot retrieval baseline.  No network, no
model weights; every response is canned.
"""

from searchgain.corpus import Corpus, Document, build_index
from searchgain.gateway import ScriptedClient
from searchgain.loop import LoopConfig, run_episode
from searchgain.metrics import GoldAnswerSet
from searchgain.qa import QaExample
from searchgain.reward import baseline_accuracy, score_episode

QUESTION = (
    "What year was the film made that was about the inventor of a type of "
    "passive solar house that is made of both natural and upcycled materials "
    "such as earth-packed tires?"
)
FOLLOWUP = "What year was the film made about the inventor of Earthship?"
BASELINE_ANSWER = (
    "There is no specific year mentioned for a film made about the inventor of "
    "the Earthship. The information provided does not include details about a "
    "particular film or its release year."
)

CORPUS = Corpus([
    Document("e1", "Earthship",
             "An Earthship is a type of passive solar house made of both natural and "
             "upcycled materials such as earth-packed tires, pioneered by architect "
             "Michael Reynolds."),
    Document("e2", "Mike Reynolds",
             "Mike Reynolds is known for a type of passive solar house built from "
             "natural and upcycled materials such as earth-packed tires."),
    Document("e3", "Don Stephens",
             "Discusses earth-integrated designs and a type of passive solar housing "
             "made from natural upcycled materials such as packed tires."),
    Document("g1", "Garbage Warrior",
             "Garbage Warrior is a 2007 film about architect Mike Reynolds, inventor "
             "of the Earthship style of building."),
    Document("g2", "Garbage Warrior",
             "A 2007 film made about Reynolds and the Earthship building work."),
    Document("g3", "Earthship Biotecture",
             "A company founded to practice and teach the off-grid housing approach "
             "that appears in the film Garbage Warrior documentary footage."),
])


def main() -> int:
    index = build_index(CORPUS)
    cfg = LoopConfig(k_retrieve=3, max_turns=3)
    example = QaExample("demo", QUESTION, GoldAnswerSet(["2007"]), "demo")

    policy = ScriptedClient(
        responses=[
            f"<search_complete>False</search_complete>\n<query>{FOLLOWUP}</query>",
            "<important_info>[1, 2]</important_info>\n<search_complete>True</search_complete>",
        ],
        label="searcher",
    )
    generator = ScriptedClient(
        by_prompt={"Garbage Warrior": "2007"}, default=BASELINE_ANSWER, label="generator",
    )
    judge = ScriptedClient(default="no", label="judge")

    trajectory = run_episode(example, cfg, policy, index, generator)
    base = baseline_accuracy(example, index, generator, judge, k=cfg.k_retrieve, cfg=cfg)
    record = score_episode(trajectory, example, judge, cached_baseline=base)

    print("=== transcript ===")
    print(trajectory.transcript)
    print()
    print("=== outcome ===")
    print(f"stop reason:    {trajectory.stop_reason}")
    print(f"final context:  {[doc.doc_key for doc in trajectory.final_context]}")
    print(f"searched answer: {trajectory.prediction.text!r} (accuracy {record.acc_s3})")
    print(f"baseline accuracy: {record.acc_rag}")
    print(f"gain beyond baseline: {record.gbr}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
