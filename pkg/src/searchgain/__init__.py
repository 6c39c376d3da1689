"""Search-select-serve agent loop with a generation-gain reward.

The package splits into small, independently testable layers:

- ``corpus``: JSONL corpus ingestion and Okapi BM25 retrieval.
- ``tags``: the wire grammar the search policy speaks (information blocks,
  selections, stop decisions, follow-up queries).
- ``metrics``: binary answer correctness (span containment, LLM judge,
  exact match).
- ``gateway``: pluggable text-generation clients (scripted, HTTP,
  record/replay).
- ``loop``: the multi-turn search episode engine.
- ``qa`` / ``reward``: datasets, baseline caching, filtering, and the
  gain-beyond-RAG reward.
- ``sandbox``: a synthetic retrieval environment plus a tabular PPO trainer
  that demonstrates the reward trains a search policy.
- ``cli``: a single binary with ingest / filter / eval / train-sim
  subcommands.
"""

__version__ = "0.1.0"
