"""Instance ingestion: patches to ground-truth chunks, dataset statistics.

A raw instance is a natural-language query, a repository snapshot
(a plain directory), and a unified-diff patch. The patch's pre-image line
numbers select the ground-truth chunks; instances whose patch touches no
chunk are discarded. Statistics summarize corpus shape and the
query/file/call-graph signals the retrieval pipeline can exploit.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .callgraph import CallGraph, build_call_graph, build_contexts, load_graph, save_graph
from .chunking import ChunkerConfig, ChunkSet, chunk_repository, load_chunks, save_chunks
from .training import TrainingInstance

_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")


@dataclass
class RawInstance:
    instance_id: str
    query_text: str
    repo_root: str
    patch_text: str


@dataclass
class EditSpan:
    """Pre-image edit locations for one touched file."""

    file_path: str
    changed_lines: set[int] = field(default_factory=set)
    insertion_anchors: set[int] = field(default_factory=set)
    addition_only: bool = False


def _clean_path(header_path: str) -> str:
    path = header_path.strip().split("\t")[0]
    if path.startswith(("a/", "b/")):
        path = path[2:]
    return path.replace("\\", "/")


def parse_patch(patch_text: str) -> list[EditSpan]:
    """One EditSpan per touched file of a unified diff.

    Changed (modified/deleted) lines carry pre-image numbering. A run of
    added lines with no paired removals records an insertion anchor: the
    pre-image line after which the new text lands. New files (pre-image
    /dev/null) are addition-only and carry no lines. Renames resolve to
    the pre-image path. Malformed hunks raise with their location.
    """
    spans: dict[str, EditSpan] = {}
    lines = patch_text.splitlines()
    i = 0
    current: EditSpan | None = None
    pre_path: str | None = None

    while i < len(lines):
        line = lines[i]
        if line.startswith("--- "):
            pre_path = _clean_path(line[4:])
            i += 1
            continue
        if line.startswith("+++ "):
            if pre_path is None:
                raise ValueError(f"line {i + 1}: '+++' without preceding '---'")
            if pre_path == "/dev/null":
                post_path = _clean_path(line[4:])
                current = spans.setdefault(
                    post_path, EditSpan(file_path=post_path, addition_only=True)
                )
            else:
                current = spans.setdefault(pre_path, EditSpan(file_path=pre_path))
            pre_path = None
            i += 1
            continue
        m = _HUNK_RE.match(line)
        if m:
            if current is None:
                raise ValueError(f"line {i + 1}: hunk header outside any file section")
            old_start = int(m.group(1))
            old_count = int(m.group(2)) if m.group(2) is not None else 1
            new_count = int(m.group(4)) if m.group(4) is not None else 1
            i += 1
            old_line = old_start
            old_seen = 0
            new_seen = 0
            pending_removal = False
            while i < len(lines) and (old_seen < old_count or new_seen < new_count):
                body = lines[i]
                if body.startswith("\\"):
                    i += 1
                    continue
                if body.startswith(" ") or body == "":
                    old_line += 1
                    old_seen += 1
                    new_seen += 1
                    pending_removal = False
                elif body.startswith("-"):
                    current.changed_lines.add(old_line)
                    old_line += 1
                    old_seen += 1
                    pending_removal = True
                elif body.startswith("+"):
                    if not pending_removal and not current.addition_only:
                        # For an empty pre-image range (-l,0 of a zero-context
                        # diff), the header's l already names the line before
                        # the gap; otherwise the anchor precedes old_line.
                        anchor = old_start if old_count == 0 else old_line - 1
                        current.insertion_anchors.add(anchor)
                    new_seen += 1
                else:
                    raise ValueError(
                        f"line {i + 1}: unexpected hunk body {body[:30]!r} "
                        f"in hunk @@ -{old_start}"
                    )
                i += 1
            if old_seen != old_count or new_seen != new_count:
                raise ValueError(
                    f"hunk @@ -{old_start},{old_count} +{m.group(3)},{new_count} @@: "
                    f"body has {old_seen}/-{new_seen}+ lines"
                )
            continue
        i += 1

    return [spans[key] for key in spans]


def map_to_gt_chunks(spans: list[EditSpan], chunks: ChunkSet) -> set[str]:
    """Chunk ids whose line span contains a changed line or strictly
    contains an insertion anchor. Addition-only files contribute nothing;
    an empty result means the instance should be discarded."""
    by_file: dict[str, list] = {}
    for chunk in chunks.chunks:
        by_file.setdefault(chunk.file_path, []).append(chunk)

    gt: set[str] = set()
    for span in spans:
        if span.addition_only:
            continue
        file_chunks = by_file.get(span.file_path)
        if file_chunks is None:
            warnings.warn(f"patch touches unknown file {span.file_path!r}; span skipped")
            continue
        for chunk in file_chunks:
            s, e = chunk.line_start, chunk.line_end
            if any(s <= ln <= e for ln in span.changed_lines):
                gt.add(chunk.chunk_id)
                continue
            if any(s <= anchor < e for anchor in span.insertion_anchors):
                gt.add(chunk.chunk_id)
    return gt


def repo_identifier(repo_root: str | os.PathLike) -> str:
    """Filesystem-safe repo id: basename plus a short path hash."""
    resolved = str(Path(repo_root).resolve())
    digest = hashlib.sha256(resolved.encode("utf-8")).hexdigest()[:8]
    return f"{Path(resolved).name}-{digest}"


@dataclass
class IngestReport:
    instances: list[TrainingInstance]
    discarded: list[tuple[str, str]]
    chunk_sets: dict[str, ChunkSet]
    graphs: dict[str, CallGraph]
    repo_paths: dict[str, str]


def ingest_instances(
    raw: list[RawInstance],
    cfg: ChunkerConfig | None = None,
    build_graphs: bool = True,
) -> IngestReport:
    """Chunk each distinct repo once, map every patch, drop empty-GT
    instances with a recorded reason."""
    cfg = cfg or ChunkerConfig()
    chunk_sets: dict[str, ChunkSet] = {}
    graphs: dict[str, CallGraph] = {}
    repo_paths: dict[str, str] = {}
    instances: list[TrainingInstance] = []
    discarded: list[tuple[str, str]] = []

    for item in raw:
        if not item.query_text.strip():
            discarded.append((item.instance_id, "empty query"))
            continue
        repo_id = repo_identifier(item.repo_root)
        if repo_id not in chunk_sets:
            try:
                chunk_set = chunk_repository(item.repo_root, cfg)
            except FileNotFoundError as exc:
                discarded.append((item.instance_id, str(exc)))
                continue
            chunk_set.repo_id = repo_id
            chunk_sets[repo_id] = chunk_set
            repo_paths[repo_id] = str(Path(item.repo_root).resolve())
            if build_graphs:
                graphs[repo_id] = build_call_graph(chunk_set)
        chunk_set = chunk_sets[repo_id]
        try:
            spans = parse_patch(item.patch_text)
        except ValueError as exc:
            discarded.append((item.instance_id, f"bad patch: {exc}"))
            continue
        gt = map_to_gt_chunks(spans, chunk_set)
        if not gt:
            discarded.append((item.instance_id, "no ground-truth chunks"))
            continue
        instances.append(
            TrainingInstance(
                query_text=item.query_text,
                chunk_set=chunk_set,
                gt_ids=gt,
                instance_id=item.instance_id,
            )
        )
    return IngestReport(
        instances=instances,
        discarded=discarded,
        chunk_sets=chunk_sets,
        graphs=graphs,
        repo_paths=repo_paths,
    )


def build_instances(
    raw: list[RawInstance], cfg: ChunkerConfig | None = None
) -> list[TrainingInstance]:
    """Retained training instances; discards are reported via a warning."""
    report = ingest_instances(raw, cfg, build_graphs=False)
    if report.discarded:
        warnings.warn(
            f"{len(report.discarded)} instance(s) discarded: {report.discarded[:3]}"
        )
    return report.instances


# --- dataset statistics -----------------------------------------------------


@dataclass
class DatasetStats:
    instance_count: int
    files_per_repo_mean: float
    files_per_repo_sd: float
    chunks_per_repo_mean: float
    chunks_per_repo_sd: float
    gt_chunks_mean: float
    gt_chunks_sd: float
    chunks_per_file_mean: float
    chunks_per_file_sd: float
    files_per_gt_mean: float
    files_per_gt_sd: float
    gt_file_overlap: float
    gt_file_in_query: float
    gt_call_overlap: float
    calls_per_chunk_mean: float
    calls_per_chunk_sd: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _mean_sd(values) -> tuple[float, float]:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return 0.0, 0.0
    return float(arr.mean()), float(arr.std())


def dataset_stats(
    instances: list[TrainingInstance], graphs: dict[str, CallGraph]
) -> DatasetStats:
    """Corpus statistics; `graphs` is keyed by instance_id.

    gt_file_overlap and gt_call_overlap are fractions over instances with
    at least two ground-truth chunks; gt_file_in_query is the fraction of
    all instances whose query contains a GT file path as an exact
    substring.
    """
    files_per_repo, chunks_per_repo = [], []
    gt_counts, files_per_gt = [], []
    chunks_per_file_pool = []
    calls_per_chunk_pool = []
    overlap_hits, overlap_eligible = 0, 0
    call_hits, call_eligible = 0, 0
    query_hits = 0

    for inst in instances:
        chunk_set = inst.chunk_set
        file_counts: dict[str, int] = {}
        for chunk in chunk_set.chunks:
            file_counts[chunk.file_path] = file_counts.get(chunk.file_path, 0) + 1
        files_per_repo.append(len(file_counts))
        chunks_per_repo.append(len(chunk_set))
        chunks_per_file_pool.extend(file_counts.values())

        gt = sorted(inst.gt_ids)
        gt_counts.append(len(gt))
        gt_files = [chunk_set.get(g).file_path for g in gt]
        files_per_gt.append(len(set(gt_files)))

        if any(path in inst.query_text for path in set(gt_files)):
            query_hits += 1

        if len(gt) >= 2:
            overlap_eligible += 1
            if len(set(gt_files)) < len(gt_files):
                overlap_hits += 1

        graph = graphs.get(inst.instance_id)
        if graph is not None:
            degree: dict[str, int] = {cid: 0 for cid in chunk_set.ids()}
            for caller, _ in graph.edges:
                degree[caller] = degree.get(caller, 0) + 1
            calls_per_chunk_pool.extend(degree.values())
            if len(gt) >= 2:
                call_eligible += 1
                gt_set = set(gt)
                if any(
                    caller in gt_set and callee in gt_set
                    for caller, callee in graph.edges
                ):
                    call_hits += 1

    fr_mean, fr_sd = _mean_sd(files_per_repo)
    cr_mean, cr_sd = _mean_sd(chunks_per_repo)
    gt_mean, gt_sd = _mean_sd(gt_counts)
    cf_mean, cf_sd = _mean_sd(chunks_per_file_pool)
    fg_mean, fg_sd = _mean_sd(files_per_gt)
    cc_mean, cc_sd = _mean_sd(calls_per_chunk_pool)

    return DatasetStats(
        instance_count=len(instances),
        files_per_repo_mean=fr_mean,
        files_per_repo_sd=fr_sd,
        chunks_per_repo_mean=cr_mean,
        chunks_per_repo_sd=cr_sd,
        gt_chunks_mean=gt_mean,
        gt_chunks_sd=gt_sd,
        chunks_per_file_mean=cf_mean,
        chunks_per_file_sd=cf_sd,
        files_per_gt_mean=fg_mean,
        files_per_gt_sd=fg_sd,
        gt_file_overlap=(overlap_hits / overlap_eligible) if overlap_eligible else 0.0,
        gt_file_in_query=(query_hits / len(instances)) if instances else 0.0,
        gt_call_overlap=(call_hits / call_eligible) if call_eligible else 0.0,
        calls_per_chunk_mean=cc_mean,
        calls_per_chunk_sd=cc_sd,
    )


# --- raw and prepared file formats -------------------------------------------


def load_raw_instances(path: str | os.PathLike) -> list[RawInstance]:
    """JSONL records {instance_id, query, repo_path, patch}; relative
    repo paths resolve against the instance file's directory."""
    base = Path(path).resolve().parent
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                repo = Path(record["repo_path"])
                if not repo.is_absolute():
                    repo = base / repo
                out.append(
                    RawInstance(
                        instance_id=str(record["instance_id"]),
                        query_text=record["query"],
                        repo_root=str(repo),
                        patch_text=record["patch"],
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad instance record: {exc}") from exc
    return out


def save_prepared(report: IngestReport, out_dir: str | os.PathLike) -> None:
    """Prepared dataset layout: instances.jsonl, repos.json, discarded.jsonl,
    chunks/<repo_id>.jsonl, graphs/<repo_id>.jsonl."""
    out = Path(out_dir)
    (out / "chunks").mkdir(parents=True, exist_ok=True)
    (out / "graphs").mkdir(parents=True, exist_ok=True)

    with open(out / "instances.jsonl", "w", encoding="utf-8") as f:
        for inst in report.instances:
            f.write(
                json.dumps(
                    {
                        "instance_id": inst.instance_id,
                        "query": inst.query_text,
                        "repo_id": inst.chunk_set.repo_id,
                        "gt_ids": sorted(inst.gt_ids),
                    }
                )
                + "\n"
            )
    with open(out / "discarded.jsonl", "w", encoding="utf-8") as f:
        for instance_id, reason in report.discarded:
            f.write(json.dumps({"instance_id": instance_id, "reason": reason}) + "\n")
    with open(out / "repos.json", "w", encoding="utf-8") as f:
        json.dump(report.repo_paths, f, indent=2, sort_keys=True)
    for repo_id, chunk_set in report.chunk_sets.items():
        save_chunks(chunk_set, out / "chunks" / f"{repo_id}.jsonl")
    for repo_id, graph in report.graphs.items():
        save_graph(graph, out / "graphs" / f"{repo_id}.jsonl")


def load_prepared(
    prepared_dir: str | os.PathLike,
    with_contexts: bool = False,
    context_budget: int = 4096,
) -> tuple[list[TrainingInstance], dict[str, ChunkSet], dict[str, CallGraph]]:
    """Load a prepared dataset; with_contexts attaches call-graph contexts
    (requires graphs/ written at ingest time)."""
    base = Path(prepared_dir)
    instances_file = base / "instances.jsonl"
    if not instances_file.exists():
        raise FileNotFoundError(f"not a prepared dataset (no instances.jsonl): {base}")

    chunk_sets: dict[str, ChunkSet] = {}
    graphs: dict[str, CallGraph] = {}
    contexts_by_repo: dict[str, dict] = {}
    instances: list[TrainingInstance] = []

    with open(instances_file, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                repo_id = record["repo_id"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{instances_file}:{lineno}: bad record") from exc
            if repo_id not in chunk_sets:
                chunk_sets[repo_id] = load_chunks(
                    base / "chunks" / f"{repo_id}.jsonl", repo_id=repo_id
                )
                graph_path = base / "graphs" / f"{repo_id}.jsonl"
                if graph_path.exists():
                    graphs[repo_id] = load_graph(graph_path, chunk_sets[repo_id])
                if with_contexts:
                    if repo_id not in graphs:
                        raise FileNotFoundError(
                            f"contexts requested but no graph for repo {repo_id}"
                        )
                    contexts_by_repo[repo_id] = build_contexts(
                        chunk_sets[repo_id], graphs[repo_id], context_budget
                    )
            instances.append(
                TrainingInstance(
                    query_text=record["query"],
                    chunk_set=chunk_sets[repo_id],
                    gt_ids=set(record["gt_ids"]),
                    instance_id=str(record["instance_id"]),
                    contexts=contexts_by_repo.get(repo_id),
                )
            )
    return instances, chunk_sets, graphs
