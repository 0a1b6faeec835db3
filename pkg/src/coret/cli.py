"""Command-line pipeline: chunk -> graph -> index -> query/eval, plus
dataset ingestion, statistics, and toy-embedder training.

Every mutating command writes a RunManifest JSON next to its output
(command line, config snapshot, seeds, input digests, tool version,
timestamp) so runs are reproducible. Exit codes: 0 success, 1 usage
error, 2 data/environment error. The provider auth token is read from
the environment variable named in `embedding.TOKEN_ENV_VAR`
(CORET_PROVIDER_TOKEN); its value is never logged.
"""

from __future__ import annotations

import argparse
import csv
import glob as globlib
import hashlib
import io
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .callgraph import (
    DEFAULT_CONTEXT_BUDGET,
    build_call_graph,
    build_contexts,
    load_graph,
    save_contexts,
    save_graph,
)
from .chunking import ChunkerConfig, chunk_repository, load_chunks, save_chunks
from .dataset import (
    dataset_stats,
    ingest_instances,
    load_prepared,
    load_raw_instances,
    save_prepared,
)
from .embedding import (
    ProviderEmbedder,
    ProviderError,
    ToyEmbedder,
    load_params,
    save_params,
)
from .lexical import bm25_build, bm25_rank
from .metrics import evaluate
from .retrieval import build_index, load_index, save_index, top_k
from .training import (
    TrainingConfig,
    load_training_config,
    train_toy,
)

DEFAULT_SEED = 0


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


# --- manifest ---------------------------------------------------------------


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _sha256_tree(root) -> str:
    h = hashlib.sha256()
    for path in sorted(p for p in Path(root).rglob("*") if p.is_file()):
        h.update(path.relative_to(root).as_posix().encode("utf-8"))
        h.update(_sha256_file(path).encode("ascii"))
    return h.hexdigest()


def write_manifest(out_path, argv, config: dict, seeds: dict, input_digests: dict) -> Path:
    manifest = {
        "command_line": ["coret", *argv],
        "config": config,
        "seeds": seeds,
        "input_digests": input_digests,
        "version": __version__,
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    path = Path(str(out_path) + ".manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# --- embedder resolution ----------------------------------------------------


def _resolve_embedder(spec: str, seed: int, vocab_size: int, dim: int, max_tokens: int):
    """`toy` (fresh seeded weights), `toy:<params-file>`, or `provider:<URL>`."""
    if spec == "toy":
        return ToyEmbedder(vocab_size=vocab_size, dim=dim, max_tokens=max_tokens, seed=seed).fit()
    if spec.startswith("toy:"):
        return ToyEmbedder.from_params(load_params(spec[len("toy:"):]))
    if spec.startswith("provider:"):
        return ProviderEmbedder(spec[len("provider:"):])
    raise ValueError(
        f"unknown embedder {spec!r}; expected toy, toy:<params-file> or provider:<URL>"
    )


def _split_csv(value: str | None) -> tuple[str, ...] | None:
    if value is None:
        return None
    parts = tuple(p.strip() for p in value.split(",") if p.strip())
    return parts or None


# --- subcommand handlers ----------------------------------------------------


def _cmd_chunk(args, argv) -> int:
    cfg = ChunkerConfig(include_path=not args.no_path_prefix)
    include = _split_csv(args.include_globs)
    exclude = _split_csv(args.exclude_globs)
    if include:
        cfg.include_globs = include
    if exclude:
        cfg.exclude_globs = exclude
    chunk_set = chunk_repository(args.repo, cfg)
    save_chunks(chunk_set, args.out)
    write_manifest(
        args.out,
        argv,
        config={
            "include_globs": cfg.include_globs,
            "exclude_globs": cfg.exclude_globs,
            "include_path": cfg.include_path,
            "max_file_bytes": cfg.max_file_bytes,
            "min_remainder_lines": cfg.min_remainder_lines,
            "skipped_files": chunk_set.skipped_files,
        },
        seeds={"seed": args.seed},
        input_digests={str(args.repo): _sha256_tree(args.repo)},
    )
    print(f"{len(chunk_set)} chunks from {args.repo} -> {args.out} "
          f"({len(chunk_set.skipped_files)} files skipped)")
    return 0


def _cmd_graph(args, argv) -> int:
    chunks = load_chunks(args.chunks)
    graph = build_call_graph(chunks)
    save_graph(graph, args.out)
    d = graph.diagnostics
    write_manifest(
        args.out,
        argv,
        config={
            "resolved_calls": d.resolved_calls,
            "unresolved_calls": d.unresolved_calls,
            "unparsed_chunks": d.unparsed_chunks,
        },
        seeds={"seed": args.seed},
        input_digests={str(args.chunks): _sha256_file(args.chunks)},
    )
    print(f"{len(graph.edges)} edges -> {args.out} "
          f"(resolved {d.resolved_calls}, dropped {d.unresolved_calls})")
    return 0


def _cmd_context(args, argv) -> int:
    chunks = load_chunks(args.chunks)
    graph = load_graph(args.graph, chunks)
    contexts = build_contexts(chunks, graph, args.budget, args.direction)
    save_contexts(contexts, args.out)
    write_manifest(
        args.out,
        argv,
        config={"budget": args.budget, "direction": args.direction},
        seeds={"seed": args.seed},
        input_digests={
            str(args.chunks): _sha256_file(args.chunks),
            str(args.graph): _sha256_file(args.graph),
        },
    )
    with_neighbors = sum(1 for c in contexts.values() if c.included_neighbor_ids)
    print(f"{len(contexts)} contexts -> {args.out} ({with_neighbors} with neighbors)")
    return 0


def _cmd_index(args, argv) -> int:
    chunks = load_chunks(args.chunks, repo_id=args.repo_id)
    embedder = _resolve_embedder(
        args.embedder, args.seed, args.vocab_size, args.dim, args.max_tokens
    )
    contexts = None
    inputs = {str(args.chunks): _sha256_file(args.chunks)}
    if args.graph:
        graph = load_graph(args.graph, chunks)
        contexts = build_contexts(chunks, graph, args.budget)
        inputs[str(args.graph)] = _sha256_file(args.graph)
    if args.embedder.startswith("toy:"):
        inputs[args.embedder[4:]] = _sha256_file(args.embedder[4:])
    index = build_index(chunks, contexts=contexts, embedder=embedder)
    save_index(index, args.out)
    write_manifest(
        args.out,
        argv,
        config={
            "embedder": args.embedder,
            "fingerprint": index.fingerprint,
            "include_path": index.include_path,
            "budget": args.budget if args.graph else None,
            "repo_id": index.repo_id,
        },
        seeds={"seed": args.seed},
        input_digests=inputs,
    )
    print(f"index with {len(index)} entries (dim {index.dim}) -> {args.out}")
    return 0


def _cmd_query(args, argv) -> int:
    if args.index == "none":
        if not args.bm25:
            raise ValueError("--index none requires --bm25 <chunks-file>")
        stats = bm25_build(load_chunks(args.bm25))
        ranking = bm25_rank(stats, args.q, args.k)
    else:
        index = load_index(args.index)
        embedder = _resolve_embedder(
            args.embedder, args.seed, args.vocab_size, args.dim, args.max_tokens
        )
        if embedder.fingerprint() != index.fingerprint:
            raise ValueError(
                "embedder fingerprint does not match the index "
                f"({embedder.fingerprint()[:12]}... vs {index.fingerprint[:12]}...)"
            )
        vec = embedder.embed([args.q])[0]
        ranking = top_k(index, vec, args.k)
    for chunk_id, score_value in ranking.ranked:
        print(f"{score_value:.6f}\t{chunk_id}")
    return 0


def _cmd_eval(args, argv) -> int:
    ks = [int(k) for k in args.ks.split(",") if k.strip()]
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    levels = [lv.strip() for lv in args.level.split(",") if lv.strip()]
    instances, _, _ = load_prepared(args.data)
    if not instances:
        raise ValueError(f"no instances in {args.data}")

    index_paths = sorted(globlib.glob(args.index_glob))
    if not index_paths:
        raise ValueError(f"no index files match {args.index_glob!r}")
    indexes = {}
    for path in index_paths:
        index = load_index(path)
        expected_path_flag = not args.no_path_prefix
        if index.include_path != expected_path_flag:
            raise ValueError(
                f"{path}: built with include_path={index.include_path}, "
                f"but this evaluation expects {expected_path_flag}"
            )
        indexes[index.repo_id] = index

    embedder = _resolve_embedder(
        args.embedder, args.seed, args.vocab_size, args.dim, args.max_tokens
    )
    rankings = {}
    for inst in instances:
        repo_id = inst.chunk_set.repo_id
        if repo_id not in indexes:
            raise ValueError(f"no index for repo {repo_id} (instance {inst.instance_id})")
        index = indexes[repo_id]
        if embedder.fingerprint() != index.fingerprint:
            raise ValueError(f"embedder fingerprint does not match index for {repo_id}")
        vec = embedder.embed([inst.query_text])[0]
        rankings[inst.instance_id] = top_k(index, vec, max(ks), query_id=inst.instance_id)

    result = evaluate(instances, rankings, ks, metrics=metrics, levels=levels)

    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["instance_id", "level", "metric", "k", "value"])
    for instance_id, level, metric, k, value in result.rows:
        writer.writerow([instance_id, level, metric, "" if k is None else k, f"{value:.6f}"])
    for (level, metric, k), value in sorted(
        result.aggregates.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2] or 0)
    ):
        writer.writerow(["aggregate", level, metric, "" if k is None else k, f"{value:.6f}"])
    csv_text = buffer.getvalue()

    if args.out:
        Path(args.out).write_text(csv_text, encoding="utf-8")
        write_manifest(
            args.out,
            argv,
            config={"ks": ks, "metrics": metrics, "levels": levels,
                    "embedder": args.embedder, "no_path_prefix": args.no_path_prefix},
            seeds={"seed": args.seed},
            input_digests={
                **{p: _sha256_file(p) for p in index_paths},
                str(Path(args.data) / "instances.jsonl"): _sha256_file(
                    Path(args.data) / "instances.jsonl"
                ),
            },
        )
        print(f"evaluation over {result.instance_count} instances -> {args.out}")
    else:
        sys.stdout.write(csv_text)
    return 0


def _cmd_stats(args, argv) -> int:
    raw = load_raw_instances(args.data)
    report = ingest_instances(raw)
    graphs_by_instance = {
        inst.instance_id: report.graphs[inst.chunk_set.repo_id]
        for inst in report.instances
    }
    stats = dataset_stats(report.instances, graphs_by_instance)
    doc = stats.to_dict()
    doc["discarded_count"] = len(report.discarded)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        write_manifest(
            args.out,
            argv,
            config={},
            seeds={"seed": args.seed},
            input_digests={str(args.data): _sha256_file(args.data)},
        )
        print(f"stats over {stats.instance_count} instances -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_ingest(args, argv) -> int:
    raw = load_raw_instances(args.data)
    report = ingest_instances(raw)
    save_prepared(report, args.out)
    write_manifest(
        Path(args.out) / "prepared",
        argv,
        config={"retained": len(report.instances), "discarded": report.discarded},
        seeds={"seed": args.seed},
        input_digests={str(args.data): _sha256_file(args.data)},
    )
    print(
        f"{len(report.instances)} instances prepared -> {args.out} "
        f"({len(report.discarded)} discarded)"
    )
    return 0


def _cmd_train_toy(args, argv) -> int:
    cfg = load_training_config(args.config) if args.config else TrainingConfig()
    if args.seed is not None:
        cfg.rng_seed = args.seed
    data_path = Path(args.data)
    prepared_dir = data_path if data_path.is_dir() else data_path.parent
    instances, _, _ = load_prepared(
        prepared_dir,
        with_contexts=cfg.use_call_graph_context,
        context_budget=args.budget,
    )
    if not instances:
        raise ValueError(f"no instances in {prepared_dir}")

    bm25_stats_by_id = None
    if cfg.negative_source == "in_instance_plus_bm25":
        stats_by_repo = {}
        bm25_stats_by_id = {}
        for inst in instances:
            repo_id = inst.chunk_set.repo_id
            if repo_id not in stats_by_repo:
                stats_by_repo[repo_id] = bm25_build(inst.chunk_set)
            bm25_stats_by_id[inst.instance_id] = stats_by_repo[repo_id]

    params, history = train_toy(instances, cfg, bm25_stats_by_id=bm25_stats_by_id)
    save_params(params, args.out)

    history_path = args.history or str(args.out) + ".history.csv"
    with open(history_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss", "recall@5", "recall@20"])
        for row in history:
            writer.writerow(
                [row["epoch"], f"{row['mean_loss']:.6f}",
                 f"{row['recall@5']:.6f}", f"{row['recall@20']:.6f}"]
            )

    write_manifest(
        args.out,
        argv,
        config={f: getattr(cfg, f) for f in cfg.__dataclass_fields__},
        seeds={"seed": cfg.rng_seed},
        input_digests={
            str(prepared_dir / "instances.jsonl"): _sha256_file(
                prepared_dir / "instances.jsonl"
            ),
            **({str(args.config): _sha256_file(args.config)} if args.config else {}),
        },
    )
    final = history[-1] if history else {"mean_loss": float("nan")}
    print(
        f"trained {cfg.epochs} epoch(s) over {len(instances)} instances -> {args.out} "
        f"(final mean loss {final['mean_loss']:.4f}; history {history_path})"
    )
    return 0


# --- parser -----------------------------------------------------------------


def _add_embedder_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--embedder", default="toy",
                   help="toy | toy:<params-file> | provider:<URL>")
    p.add_argument("--vocab-size", type=int, default=32768)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--max-tokens", type=int, default=1024)


def build_parser() -> _Parser:
    parser = _Parser(prog="coret", description=__doc__)
    parser.add_argument("--version", action="version", version=f"coret {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("chunk", help="chunk a repository into a JSONL store")
    p.add_argument("--repo", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--include-globs", default=None)
    p.add_argument("--exclude-globs", default=None)
    p.add_argument("--no-path-prefix", action="store_true")
    p.set_defaults(handler=_cmd_chunk)

    p = sub.add_parser("graph", help="build the static call graph over chunks")
    p.add_argument("--chunks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_graph)

    p = sub.add_parser("context", help="assemble call-graph context text per chunk")
    p.add_argument("--chunks", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--budget", type=int, default=DEFAULT_CONTEXT_BUDGET)
    p.add_argument("--direction", choices=("downstream", "upstream", "both"),
                   default="downstream")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_context)

    p = sub.add_parser("index", help="embed chunks into a dense index")
    p.add_argument("--chunks", required=True)
    p.add_argument("--graph", default=None)
    p.add_argument("--budget", type=int, default=DEFAULT_CONTEXT_BUDGET)
    p.add_argument("--repo-id", default=None)
    p.add_argument("--out", required=True)
    _add_embedder_flags(p)
    p.set_defaults(handler=_cmd_index)

    p = sub.add_parser("query", help="rank chunks for a query string")
    p.add_argument("--index", required=True, help="index file, or 'none' with --bm25")
    p.add_argument("--bm25", default=None, help="chunk store for BM25 ranking")
    p.add_argument("--q", required=True)
    p.add_argument("--k", type=int, default=20)
    _add_embedder_flags(p)
    p.set_defaults(handler=_cmd_query)

    p = sub.add_parser("eval", help="evaluate rankings over a prepared dataset")
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--index-glob", required=True)
    p.add_argument("--ks", default="5,20")
    p.add_argument("--metrics", default="recall,mrr,perfect")
    p.add_argument("--level", default="chunk")
    p.add_argument("--no-path-prefix", action="store_true")
    p.add_argument("--out", default=None)
    _add_embedder_flags(p)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("stats", help="dataset statistics from raw instances")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_stats)

    p = sub.add_parser("ingest", help="prepare raw instances for training/eval")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_ingest)

    p = sub.add_parser("train-toy", help="train the toy embedder")
    p.add_argument("--data", required=True, help="prepared dataset dir (or its instances.jsonl)")
    p.add_argument("--config", default=None, help="flat key=value training config")
    p.add_argument("--out", required=True, help="output params file")
    p.add_argument("--history", default=None, help="history CSV (default <out>.history.csv)")
    p.add_argument("--budget", type=int, default=DEFAULT_CONTEXT_BUDGET)
    p.set_defaults(handler=_cmd_train_toy)

    for sp in sub.choices.values():
        sp.add_argument(
            "--seed", type=int, default=None,
            help=f"rng seed (default {DEFAULT_SEED})",
        )

    return parser


def dispatch(argv) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"coret: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    if getattr(args, "seed", None) is None and args.command != "train-toy":
        args.seed = DEFAULT_SEED
    try:
        return args.handler(args, list(argv))
    except _UsageError as exc:
        print(f"coret: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, ProviderError) as exc:
        print(f"coret: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
