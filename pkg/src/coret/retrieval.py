"""Dense chunk index: store embeddings, answer exact top-k cosine queries.

Search is an exhaustive scan (corpora here are thousands of chunks, where
exact scan is fast and keeps recall free of ANN confounders). Vectors are
persisted at 32-bit precision; scoring happens in 64-bit, and the in-memory
index holds the already-quantized values so results match a save/load round
trip bit for bit.
"""

from __future__ import annotations

import base64
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .chunking import Chunk, ChunkSet


@dataclass
class RankedRetrieval:
    """Ranking over chunk ids: scores non-increasing, ties broken by
    ascending chunk_id, no duplicates."""

    query_id: str
    ranked: list[tuple[str, float]]

    def ids(self) -> list[str]:
        return [chunk_id for chunk_id, _ in self.ranked]

    def validate(self) -> None:
        ids = self.ids()
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate chunk_ids in ranking")
        for (id_a, score_a), (id_b, score_b) in zip(self.ranked, self.ranked[1:]):
            if score_b > score_a:
                raise ValueError("scores increase along the ranking")
            if score_b == score_a and id_b < id_a:
                raise ValueError("tie not broken by ascending chunk_id")


@dataclass
class Index:
    repo_id: str
    dim: int
    fingerprint: str
    include_path: bool
    chunk_ids: list[str]
    vectors: np.ndarray = field(repr=False)
    excluded: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.vectors.shape != (len(self.chunk_ids), self.dim):
            raise ValueError(
                f"vectors shape {self.vectors.shape} != {(len(self.chunk_ids), self.dim)}"
            )

    def __len__(self) -> int:
        return len(self.chunk_ids)

    def vector(self, chunk_id: str) -> np.ndarray:
        return self.vectors[self.chunk_ids.index(chunk_id)]


def _quantize(vectors: np.ndarray) -> np.ndarray:
    """Round-trip through float32, the persistence precision."""
    return vectors.astype(np.float32).astype(np.float64)


def _cosine_scores(vectors: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-row cosine against q.

    Reductions go through np.sum over the contiguous last axis, whose
    summation order per row does not depend on the matrix height — so a
    1-row call (score) returns bit-identically what a full-matrix call
    (top_k) computes for that row. BLAS matvec would not guarantee that.
    """
    prods = np.sum(vectors * q, axis=1)
    norms = np.sqrt(np.sum(vectors * vectors, axis=1))
    qn = np.sqrt(np.sum(q * q))
    return prods / (norms * qn)


def build_index(chunks: ChunkSet, contexts=None, embedder=None, include_path=None) -> Index:
    """Embed every chunk (context_text when contexts are given, else
    rendered_text) into one index. Chunks whose embedding fails are
    excluded with a warning, not fatal.
    """
    if embedder is None:
        raise ValueError("build_index needs an embedder")
    texts, spans, kept = [], [], []
    excluded: list[tuple[str, str]] = []
    for chunk in chunks.chunks:
        if contexts is not None:
            if chunk.chunk_id not in contexts:
                raise KeyError(f"no context for chunk {chunk.chunk_id}")
            ctx = contexts[chunk.chunk_id]
            texts.append(ctx.context_text)
            spans.append(ctx.segment_spans)
        else:
            texts.append(chunk.rendered_text)
            spans.append(None)
        kept.append(chunk.chunk_id)

    rows, ids = [], []
    for chunk_id, text, span in zip(kept, texts, spans):
        try:
            rows.append(embedder.embed([text], [span])[0])
            ids.append(chunk_id)
        except ValueError as exc:
            excluded.append((chunk_id, str(exc)))
    if excluded:
        warnings.warn(f"{len(excluded)} chunk(s) excluded from index: {excluded[:3]}")

    if include_path is None:
        include_path = all(
            c.rendered_text.startswith(c.file_path + "\n") for c in chunks.chunks
        )
    vectors = (
        _quantize(np.stack(rows)) if rows else np.zeros((0, embedder.dim))
    )
    return Index(
        repo_id=chunks.repo_id,
        dim=embedder.dim,
        fingerprint=embedder.fingerprint(),
        include_path=bool(include_path),
        chunk_ids=ids,
        vectors=vectors,
        excluded=excluded,
    )


def top_k(index: Index, query_vec: np.ndarray, k: int, query_id: str = "") -> RankedRetrieval:
    """The k highest-cosine entries (all when k exceeds the index), sorted
    by score descending, ties by ascending chunk_id."""
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        raise ValueError(f"k must be a positive integer, got {k!r}")
    q = np.asarray(query_vec, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query dim {q.shape} != index dim {index.dim}")
    if not np.all(np.isfinite(q)):
        raise ValueError("query vector contains non-finite values")
    if len(index) == 0:
        return RankedRetrieval(query_id=query_id, ranked=[])

    qn = float(np.linalg.norm(q))
    if qn < 1e-12:
        raise ValueError("query vector has zero norm")
    scores = _cosine_scores(index.vectors, q)

    ids_arr = np.array(index.chunk_ids)
    order = np.lexsort((ids_arr, -scores))
    order = order[: min(k, len(order))]
    return RankedRetrieval(
        query_id=query_id,
        ranked=[(str(ids_arr[i]), float(scores[i])) for i in order],
    )


def score(query_text: str, chunk: Chunk, embedder) -> float:
    """Cosine of the query and chunk embeddings; the chunk side passes
    through float32 like an index entry and the arithmetic matches top_k's,
    so the value equals what top_k reports for the same chunk."""
    q = np.asarray(embedder.embed([query_text])[0], dtype=np.float64)
    c_rows = _quantize(np.asarray(embedder.embed([chunk.rendered_text]), dtype=np.float64))
    return float(_cosine_scores(c_rows, q)[0])


# --- persistence ------------------------------------------------------------


def save_index(index: Index, path: str | os.PathLike) -> None:
    header = {
        "repo_id": index.repo_id,
        "dim": index.dim,
        "fingerprint": index.fingerprint,
        "include_path": index.include_path,
        "count": len(index.chunk_ids),
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for chunk_id, vec in zip(index.chunk_ids, index.vectors):
            raw = np.ascontiguousarray(vec, dtype="<f4").tobytes()
            record = {
                "chunk_id": chunk_id,
                "vector_b64": base64.b64encode(raw).decode("ascii"),
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def load_index(path: str | os.PathLike) -> Index:
    with open(path, encoding="utf-8") as f:
        try:
            header = json.loads(f.readline())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not an index file") from exc
        for key in ("repo_id", "dim", "fingerprint", "include_path", "count"):
            if key not in header:
                raise ValueError(f"{path}: index header missing {key!r}")
        dim = int(header["dim"])
        ids, rows = [], []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                raw = base64.b64decode(record["vector_b64"])
                vec = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad index entry") from exc
            if vec.shape != (dim,):
                raise ValueError(f"{path}:{lineno}: vector dim {vec.shape[0]} != {dim}")
            ids.append(record["chunk_id"])
            rows.append(vec)
    if len(ids) != int(header["count"]):
        raise ValueError(f"{path}: header count {header['count']} != {len(ids)} entries")
    vectors = np.stack(rows) if rows else np.zeros((0, dim))
    return Index(
        repo_id=header["repo_id"],
        dim=dim,
        fingerprint=header["fingerprint"],
        include_path=bool(header["include_path"]),
        chunk_ids=ids,
        vectors=vectors,
    )


class DenseRetriever(BaseEstimator):
    """Estimator front for the dense index: fit on a ChunkSet, then rank
    query strings."""

    def __init__(self, embedder=None, k: int = 20):
        self.embedder = embedder
        self.k = k

    def fit(self, X: ChunkSet, y=None, contexts=None) -> "DenseRetriever":
        if self.embedder is None:
            raise ValueError("DenseRetriever needs an embedder")
        self.index_ = build_index(X, contexts=contexts, embedder=self.embedder)
        return self

    def query(self, text: str, k: int | None = None, query_id: str = "") -> RankedRetrieval:
        if not hasattr(self, "index_"):
            raise NotFittedError("DenseRetriever is not fitted; call fit() first")
        vec = self.embedder.embed([text])[0]
        return top_k(self.index_, vec, k if k is not None else self.k, query_id)

    def predict(self, X) -> list[list[str]]:
        """Top-k chunk ids per query string."""
        return [self.query(text).ids() for text in X]
