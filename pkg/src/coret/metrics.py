"""Retrieval metrics: Recall@k, MRR, Perfect-Recall@k, chunk- and file-level.

All metrics read only the ranked id sequence, never the scores. File-level
variants map ranked chunks to their files (first occurrence kept, order
preserved) and apply the chunk-level definition to the file sequences.
"""

from __future__ import annotations

from dataclasses import dataclass

from .chunking import ChunkSet
from .retrieval import RankedRetrieval

METRICS = ("recall", "mrr", "perfect")
LEVELS = ("chunk", "file")


def _check_gt(gt_ids) -> set[str]:
    gt = set(gt_ids)
    if not gt:
        raise ValueError("gt_ids must be non-empty")
    return gt


def recall_at_k(ranked: RankedRetrieval, gt_ids, k: int) -> float:
    """|top-k ∩ GT| / |GT|."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    gt = _check_gt(gt_ids)
    top = set(ranked.ids()[:k])
    return len(top & gt) / len(gt)


def mrr(ranked: RankedRetrieval, gt_ids) -> float:
    """1 / rank of the first ground-truth hit; 0 when none is ranked."""
    gt = _check_gt(gt_ids)
    for rank, chunk_id in enumerate(ranked.ids(), start=1):
        if chunk_id in gt:
            return 1.0 / rank
    return 0.0


def perfect_recall_at_k(ranked: RankedRetrieval, gt_ids, k: int) -> int:
    """1 iff every ground-truth id appears in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    gt = _check_gt(gt_ids)
    return 1 if gt <= set(ranked.ids()[:k]) else 0


def _file_of(chunks: ChunkSet, chunk_id: str) -> str:
    if chunk_id not in chunks:
        raise KeyError(f"chunk_id not resolvable to a file: {chunk_id}")
    return chunks.get(chunk_id).file_path


def file_level(ranked: RankedRetrieval, gt_ids, chunks: ChunkSet, k: int, metric: str) -> float:
    """Chunk metric applied at file granularity: the first k ranked chunks
    map to a deduplicated file sequence (first occurrence keeps the rank
    position); ground truth maps to its file set."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    gt = _check_gt(gt_ids)
    gt_files = {_file_of(chunks, g) for g in gt}

    seen = set()
    file_sequence = []
    for chunk_id in ranked.ids()[:k]:
        path = _file_of(chunks, chunk_id)
        if path not in seen:
            seen.add(path)
            file_sequence.append(path)

    if metric == "recall":
        return len(set(file_sequence) & gt_files) / len(gt_files)
    if metric == "perfect":
        return 1.0 if gt_files <= set(file_sequence) else 0.0
    for rank, path in enumerate(file_sequence, start=1):
        if path in gt_files:
            return 1.0 / rank
    return 0.0


@dataclass
class EvalResult:
    """Per-instance metric values plus aggregate means.

    rows: (instance_id, level, metric, k, value); k is None for MRR.
    aggregates: (level, metric, k) -> arithmetic mean over instances.
    """

    instance_count: int
    rows: list[tuple[str, str, str, int | None, float]]
    aggregates: dict[tuple[str, str, int | None], float]

    def aggregate(self, metric: str, k: int | None = None, level: str = "chunk") -> float:
        return self.aggregates[(level, metric, k)]


def evaluate(
    instances,
    rankings: dict[str, RankedRetrieval],
    ks,
    metrics=("recall", "mrr", "perfect"),
    levels=("chunk",),
) -> EvalResult:
    """Metrics for every instance at every requested cut-off.

    `instances` need instance_id, gt_ids and (for file level) chunk_set
    attributes; `rankings` maps instance_id to its ranking.
    """
    instances = list(instances)
    ks = sorted(set(int(k) for k in ks))
    if not ks:
        raise ValueError("ks must be non-empty")
    for m in metrics:
        if m not in METRICS:
            raise ValueError(f"unknown metric {m!r}")
    for level in levels:
        if level not in LEVELS:
            raise ValueError(f"unknown level {level!r}")

    rows: list[tuple[str, str, str, int | None, float]] = []
    for inst in instances:
        if inst.instance_id not in rankings:
            raise KeyError(f"no ranking for instance {inst.instance_id!r}")
        ranked = rankings[inst.instance_id]
        for level in levels:
            for metric in metrics:
                if metric == "mrr":
                    if level == "chunk":
                        value = mrr(ranked, inst.gt_ids)
                    else:
                        value = file_level(ranked, inst.gt_ids, inst.chunk_set, max(ks), "mrr")
                    rows.append((inst.instance_id, level, "mrr", None, value))
                    continue
                for k in ks:
                    if level == "chunk":
                        fn = recall_at_k if metric == "recall" else perfect_recall_at_k
                        value = float(fn(ranked, inst.gt_ids, k))
                    else:
                        value = file_level(ranked, inst.gt_ids, inst.chunk_set, k, metric)
                    rows.append((inst.instance_id, level, metric, k, value))

    aggregates: dict[tuple[str, str, int | None], float] = {}
    counts: dict[tuple[str, str, int | None], int] = {}
    for _, level, metric, k, value in rows:
        key = (level, metric, k)
        aggregates[key] = aggregates.get(key, 0.0) + value
        counts[key] = counts.get(key, 0) + 1
    for key in aggregates:
        aggregates[key] /= counts[key]

    return EvalResult(
        instance_count=len(instances),
        rows=rows,
        aggregates=aggregates,
    )
