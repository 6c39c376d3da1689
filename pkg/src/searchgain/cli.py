"""Command-line surface: ingest, filter, eval, train-sim, rerun.

Every run writes a manifest (command, effective config, inputs, outputs,
seed, timestamps, build id) into its output directory, and any run can be
repeated from that manifest alone.  Config precedence is CLI flag over
config-file value over built-in default.  The --record flag captures every
generation call into one file; --replay serves all roles from such a file
with no network access.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import corpus as corpus_mod
from . import reward as reward_mod
from .files import atomic_write_text, read_jsonl, write_jsonl_atomic
from .gateway import (
    EndpointConfig,
    GatewayError,
    HttpClient,
    RecordingClient,
    ReplayClient,
)
from .loop import EpisodeError, LoopConfig, run_episode, trajectory_record
from .metrics import EvalMode, JudgeUnavailable, JudgeUnparseable, Prediction, exact_match
from .qa import DatasetFormatError, load_dataset
from .sandbox import (
    DivergenceError,
    PpoConfig,
    SoftmaxPolicy,
    make_training_tasks,
    optimal_gbr,
    train,
)
from .tags import TagProtocolError

logger = logging.getLogger(__name__)

_GRID_KS = (3, 5, 8)
_GRID_TURNS = (3, 4)


def _build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: list[str]
    outputs: list[str]
    seed: int | None
    started: str
    finished: str = ""
    build_id: str = field(default_factory=_build_id)

    def write(self, out_dir: Path) -> Path:
        self.finished = _now()
        path = out_dir / "manifest.json"
        atomic_write_text(path, json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        return path


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise SystemExit(f"config file {path} must hold a mapping")
    return data


def _merged(file_cfg: dict, section: str, overrides: dict) -> dict:
    """Config-file section updated with non-None CLI overrides."""
    merged = dict(file_cfg.get(section, {}))
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def _loop_config(file_cfg: dict, args) -> LoopConfig:
    merged = _merged(
        file_cfg,
        "loop",
        {
            "k_retrieve": getattr(args, "k", None),
            "max_turns": getattr(args, "max_turns", None),
            "max_select": getattr(args, "max_select", None),
        },
    )
    allowed = {
        "k_retrieve",
        "max_select",
        "max_turns",
        "per_turn_doc_token_budget",
        "total_context_token_budget",
        "policy_max_new_tokens",
        "policy_temperature",
    }
    unknown = set(merged) - allowed
    if unknown:
        raise SystemExit(f"unknown loop config keys: {sorted(unknown)}")
    return LoopConfig(**merged)


def _loop_dict(cfg: LoopConfig) -> dict:
    return {
        "k_retrieve": cfg.k_retrieve,
        "max_select": cfg.max_select,
        "max_turns": cfg.max_turns,
        "per_turn_doc_token_budget": cfg.per_turn_doc_token_budget,
        "total_context_token_budget": cfg.total_context_token_budget,
        "policy_max_new_tokens": cfg.policy_max_new_tokens,
        "policy_temperature": cfg.policy_temperature,
    }


def _build_clients(args, file_cfg: dict, roles: list[str]) -> dict:
    """One generation client per role, honoring --replay and --record."""
    if getattr(args, "replay", None):
        shared = ReplayClient(args.replay)
        return {role: shared for role in roles}
    endpoints = file_cfg.get("endpoints", {})
    clients = {}
    for role in roles:
        cfg = endpoints.get(role)
        if cfg is None:
            raise SystemExit(
                f"no endpoint configured for role {role!r}; provide one in the config "
                "file under endpoints:, or run with --replay <capture>"
            )
        clients[role] = HttpClient(EndpointConfig(**cfg))
    if getattr(args, "record", None):
        Path(args.record).parent.mkdir(parents=True, exist_ok=True)
        clients = {role: RecordingClient(client, args.record) for role, client in clients.items()}
    return clients


def cmd_ingest(args) -> int:
    file_cfg = _load_config_file(args.config)
    bm25 = _merged(file_cfg, "bm25", {"k1": args.k1, "b": args.b})
    params = corpus_mod.Bm25Params(**bm25) if bm25 else corpus_mod.Bm25Params()
    try:
        corpus = corpus_mod.ingest_corpus(args.corpus)
    except (FileNotFoundError, corpus_mod.CorpusFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    index = corpus_mod.build_index(corpus, params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus_mod.save_snapshot(index, out)
    print(f"documents: {len(corpus)}")
    print(f"vocabulary: {index.vocabulary_size}")
    print(f"index: {out}")
    return 0


def cmd_filter(args) -> int:
    file_cfg = _load_config_file(args.config)
    loop_cfg = _loop_config(file_cfg, args)
    mode = EvalMode(args.eval_mode)
    try:
        examples = load_dataset(args.dataset)
    except (FileNotFoundError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    index = corpus_mod.load_snapshot(args.index)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    clients = _build_clients(args, file_cfg, ["generator", "judge"])
    cache = reward_mod.BaselineCache(args.baseline_cache or out_dir / "baseline_cache.jsonl")

    manifest = RunManifest(
        command="filter",
        config={"loop": _loop_dict(loop_cfg), "eval_mode": mode.value, "jobs": args.jobs},
        inputs=[args.dataset, args.index] + ([args.config] if args.config else []),
        outputs=[],
        seed=args.seed,
        started=_now(),
    )
    result = reward_mod.filter_training_set(
        examples,
        index,
        clients["generator"],
        clients["judge"],
        k=loop_cfg.k_retrieve,
        mode=mode,
        cache=cache,
        cfg=loop_cfg,
        jobs=args.jobs,
    )
    kept_path = out_dir / "kept.jsonl"
    write_jsonl_atomic(
        kept_path,
        (
            {"id": ex.qid, "question": ex.question, "golden_answers": list(ex.golds)}
            for ex in result.kept
        ),
    )
    summary_path = out_dir / "filter_summary.json"
    atomic_write_text(summary_path, json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest.outputs = [str(kept_path), str(summary_path)]
    manifest.write(out_dir)
    print(f"input: {result.input_count}")
    print(f"yes/no dropped: {result.yes_no_dropped}")
    print(f"baseline-solved dropped: {result.baseline_solved_dropped}")
    print(f"unevaluated: {result.unevaluated}")
    print(f"kept: {len(result.kept)}")
    return 0


def _format_table(rows: list[tuple[str, int, float, float]]) -> str:
    """Aligned metrics table: dataset, n, GenAcc, EM."""
    header = f"{'dataset':<16} {'n':>5} {'GenAcc':>8} {'EM':>8}"
    lines = [header, "-" * len(header)]
    for name, n, genacc, em in rows:
        lines.append(f"{name:<16} {n:>5d} {genacc:>8.3f} {em:>8.3f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config)
    loop_cfg = _loop_config(file_cfg, args)
    mode = EvalMode(args.eval_mode)
    try:
        examples = load_dataset(args.dataset)
    except (FileNotFoundError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    index = corpus_mod.load_snapshot(args.index)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    clients = _build_clients(args, file_cfg, ["policy", "generator", "judge"])
    cache = reward_mod.BaselineCache(args.baseline_cache or out_dir / "baseline_cache.jsonl")

    manifest = RunManifest(
        command="eval",
        config={"loop": _loop_dict(loop_cfg), "eval_mode": mode.value, "jobs": args.jobs},
        inputs=[args.dataset, args.index] + ([args.config] if args.config else []),
        outputs=[],
        seed=args.seed,
        started=_now(),
    )

    def evaluate(example):
        try:
            trajectory = run_episode(
                example, loop_cfg, clients["policy"], index, clients["generator"]
            )
            baseline = reward_mod.baseline_accuracy(
                example,
                index,
                clients["generator"],
                clients["judge"],
                k=loop_cfg.k_retrieve,
                mode=mode,
                cache=cache,
                cfg=loop_cfg,
            )
            record = reward_mod.score_episode(
                trajectory, example, clients["judge"], cached_baseline=baseline, mode=mode
            )
            em = exact_match(trajectory.prediction, example.golds)
            return trajectory, record, em, None
        except (
            EpisodeError,
            GatewayError,
            JudgeUnavailable,
            JudgeUnparseable,
            TagProtocolError,
        ) as exc:
            logger.warning("episode %s failed: %s", example.qid, exc)
            return None, None, None, f"{example.qid}: {exc}"

    if args.jobs > 1 and len(examples) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(evaluate, examples))
    else:
        results = [evaluate(example) for example in examples]

    trajectories = []
    records = []
    failures = []
    per_dataset: dict[str, dict[str, float]] = {}
    for example, (trajectory, record, em, failure) in zip(examples, results):
        if failure is not None:
            failures.append(failure)
            continue
        trajectories.append(trajectory_record(trajectory, loop_cfg))
        records.append(record.to_dict())
        bucket = per_dataset.setdefault(
            example.dataset, {"n": 0, "genacc_sum": 0, "em_sum": 0}
        )
        bucket["n"] += 1
        bucket["genacc_sum"] += record.acc_s3
        bucket["em_sum"] += em

    write_jsonl_atomic(out_dir / "trajectories.jsonl", trajectories)
    write_jsonl_atomic(out_dir / "rewards.jsonl", records)

    rows = []
    summary_datasets = {}
    for name in sorted(per_dataset):
        bucket = per_dataset[name]
        n = int(bucket["n"])
        genacc = bucket["genacc_sum"] / n
        em = bucket["em_sum"] / n
        rows.append((name, n, genacc, em))
        summary_datasets[name] = {"n": n, "genacc": genacc, "em": em}
    if rows:
        macro_genacc = sum(r[2] for r in rows) / len(rows)
        macro_em = sum(r[3] for r in rows) / len(rows)
        rows.append(("Avg.", sum(r[1] for r in rows), macro_genacc, macro_em))
    else:
        macro_genacc = macro_em = 0.0

    summary = {
        "datasets": summary_datasets,
        "macro": {"genacc": macro_genacc, "em": macro_em},
        "evaluated": sum(d["n"] for d in summary_datasets.values()),
        "failures": len(failures),
        "failure_messages": failures,
    }
    atomic_write_text(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    manifest.outputs = [
        str(out_dir / "trajectories.jsonl"),
        str(out_dir / "rewards.jsonl"),
        str(out_dir / "summary.json"),
    ]
    manifest.write(out_dir)
    print(_format_table(rows))
    if failures:
        print(f"failures: {len(failures)} (excluded from averages)")
    return 0


def cmd_train_sim(args) -> int:
    file_cfg = _load_config_file(args.config)
    env_cfg = _merged(
        file_cfg,
        "env",
        {
            "n_tasks": args.n_tasks,
            "n_docs": args.n_docs,
            "n_required": args.n_required,
            "n_query_templates": args.n_query_templates,
        },
    )
    env_cfg.setdefault("n_tasks", 20)
    env_cfg.setdefault("n_docs", 10)
    env_cfg.setdefault("n_required", 2)
    env_cfg.setdefault("n_query_templates", 4)
    ppo_cfg = _merged(
        file_cfg,
        "ppo",
        {"batch_size": args.batch_size},
    )
    ppo = PpoConfig(**ppo_cfg)
    seed = args.seed if args.seed is not None else 0
    n_updates = args.updates
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    cells = (
        [(k, turns) for k in _GRID_KS for turns in _GRID_TURNS]
        if args.grid
        else [(None, None)]
    )
    base_loop = _loop_config(file_cfg, args)

    manifest = RunManifest(
        command="train-sim",
        config={
            "env": env_cfg,
            "ppo": ppo.__dict__,
            "loop": _loop_dict(base_loop),
            "updates": n_updates,
            "grid": bool(args.grid),
        },
        inputs=[args.config] if args.config else [],
        outputs=[],
        seed=seed,
        started=_now(),
    )

    outputs = []
    for k, turns in cells:
        loop_cfg = base_loop
        if k is not None:
            loop_cfg = LoopConfig(**{**_loop_dict(loop_cfg), "k_retrieve": k, "max_turns": turns})
        tasks = make_training_tasks(
            env_cfg["n_tasks"],
            loop_cfg,
            n_docs=env_cfg["n_docs"],
            n_required=env_cfg["n_required"],
            n_query_templates=env_cfg["n_query_templates"],
            seed_start=seed,
        )
        policy = SoftmaxPolicy(temperature=ppo.rollout_temperature)
        name = f"curve_k{k}_t{turns}.jsonl" if k is not None else "curve.jsonl"
        curve_path = out_dir / name
        try:
            result = train(tasks, policy, ppo, loop_cfg, n_updates=n_updates, seed=seed,
                           curve_path=curve_path)
        except DivergenceError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 3
        outputs.append(str(curve_path))
        optimal = sum(optimal_gbr(task, loop_cfg) for task in tasks) / len(tasks)
        final = result.records[-1].mean_gbr if result.records else 0.0
        tag = f"k={loop_cfg.k_retrieve} turns={loop_cfg.max_turns}"
        print(f"{tag}: updates={len(result.records)} final_mean_gbr={final:.3f} "
              f"optimal={optimal:.3f} -> {curve_path.name}")

    manifest.outputs = outputs
    manifest.write(out_dir)
    return 0


def cmd_rerun(args) -> int:
    """Re-execute a finished run from its manifest."""
    manifest_path = Path(args.manifest)
    data = json.loads(manifest_path.read_text(encoding="utf-8"))
    command = data["command"]
    config = data.get("config", {})
    out_dir = args.out or str(manifest_path.parent)

    argv = [command, "--out", out_dir]
    if data.get("seed") is not None:
        argv += ["--seed", str(data["seed"])]
    inputs = data.get("inputs", [])
    if command in ("filter", "eval"):
        dataset = next((p for p in inputs if p.endswith(".jsonl")), None)
        index = next((p for p in inputs if not p.endswith(".jsonl")), None)
        if not dataset or not index:
            print("error: manifest does not name dataset and index inputs", file=sys.stderr)
            return 1
        argv += ["--dataset", dataset, "--index", index]
        if args.replay:
            argv += ["--replay", args.replay]
        if config.get("eval_mode"):
            argv += ["--eval-mode", config["eval_mode"]]
        loop = config.get("loop", {})
        if loop:
            argv += [
                "--k", str(loop["k_retrieve"]),
                "--max-turns", str(loop["max_turns"]),
                "--max-select", str(loop["max_select"]),
            ]
    elif command == "train-sim":
        argv += ["--updates", str(config.get("updates", 50))]
        if config.get("grid"):
            argv += ["--grid"]
        env = config.get("env", {})
        for flag, key in (
            ("--n-tasks", "n_tasks"),
            ("--n-docs", "n_docs"),
            ("--n-required", "n_required"),
            ("--n-query-templates", "n_query_templates"),
        ):
            if key in env:
                argv += [flag, str(env[key])]
        ppo = config.get("ppo", {})
        if "batch_size" in ppo:
            argv += ["--batch-size", str(ppo["batch_size"])]
        loop = config.get("loop", {})
        if loop:
            argv += [
                "--k", str(loop["k_retrieve"]),
                "--max-turns", str(loop["max_turns"]),
                "--max-select", str(loop["max_select"]),
            ]
    else:
        print(f"error: cannot rerun command {command!r}", file=sys.stderr)
        return 1
    if args.config:
        argv += ["--config", args.config]
    return main(argv)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML or JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="master RNG seed")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers")


def _add_service_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--record", help="capture every generation call into this file")
    parser.add_argument("--replay", help="serve all generation calls from this capture file")
    parser.add_argument(
        "--eval-mode",
        default=EvalMode.SPAN_THEN_JUDGE.value,
        choices=[m.value for m in EvalMode],
    )
    parser.add_argument("--baseline-cache", help="baseline accuracy cache file")


def _add_loop_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--k", type=int, default=None, help="retrieval depth per query")
    parser.add_argument("--max-turns", type=int, default=None)
    parser.add_argument("--max-select", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="searchgain")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a BM25 index snapshot from a corpus file")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="index snapshot path")
    p.add_argument("--k1", type=float, default=None)
    p.add_argument("--b", type=float, default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("filter", help="drop yes/no and baseline-solved training examples")
    _add_common(p)
    _add_service_flags(p)
    _add_loop_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("eval", help="run search episodes and score answers")
    _add_common(p)
    _add_service_flags(p)
    _add_loop_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-sim", help="train the sandbox policy with PPO")
    _add_common(p)
    _add_loop_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--updates", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--n-tasks", type=int, default=None)
    p.add_argument("--n-docs", type=int, default=None)
    p.add_argument("--n-required", type=int, default=None)
    p.add_argument("--n-query-templates", type=int, default=None)
    p.add_argument("--grid", action="store_true", help="run the (k, turns) sweep")
    p.set_defaults(func=cmd_train_sim)

    p = sub.add_parser("rerun", help="repeat a finished run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output directory (defaults to the manifest's)")
    p.add_argument("--config", help="config file override")
    p.add_argument("--replay", help="capture file for offline replay")
    p.set_defaults(func=cmd_rerun)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
