"""Okapi BM25 over chunk rendered text.

Serves two roles: the lexical retrieval baseline and the hard-negative
miner for training. Shares the embedding tokenizer (string subtokens,
pre-hash) so lexical and dense scorers see the same token stream.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .chunking import ChunkSet
from .embedding import split_tokens
from .retrieval import RankedRetrieval

K1 = 1.2
B = 0.75


@dataclass
class Bm25Stats:
    repo_id: str
    chunk_ids: list[str]
    doc_count: int
    avg_doc_len: float
    doc_freq: dict[str, int]
    term_freqs: list[Counter] = field(repr=False)
    doc_lens: list[int] = field(repr=False)


def bm25_build(chunks: ChunkSet) -> Bm25Stats:
    """Corpus statistics over tokenized rendered_text of every chunk."""
    if len(chunks) == 0:
        raise ValueError("bm25_build needs at least one chunk")
    chunk_ids, term_freqs, doc_lens = [], [], []
    doc_freq: dict[str, int] = {}
    for chunk in chunks.chunks:
        tokens = split_tokens(chunk.rendered_text)
        tf = Counter(tokens)
        chunk_ids.append(chunk.chunk_id)
        term_freqs.append(tf)
        doc_lens.append(len(tokens))
        for term in tf:
            doc_freq[term] = doc_freq.get(term, 0) + 1
    return Bm25Stats(
        repo_id=chunks.repo_id,
        chunk_ids=chunk_ids,
        doc_count=len(chunk_ids),
        avg_doc_len=sum(doc_lens) / len(doc_lens),
        doc_freq=doc_freq,
        term_freqs=term_freqs,
        doc_lens=doc_lens,
    )


def idf(stats: Bm25Stats, term: str) -> float:
    """ln((N - df + 0.5) / (df + 0.5) + 1); the +1 keeps idf non-negative."""
    df = stats.doc_freq.get(term, 0)
    return math.log((stats.doc_count - df + 0.5) / (df + 0.5) + 1.0)


def bm25_score(stats: Bm25Stats, query_tokens: list[str], doc_idx: int) -> float:
    """Okapi score of one document against the query token sequence; each
    query token occurrence contributes its saturating-tf term."""
    tf = stats.term_freqs[doc_idx]
    dl = stats.doc_lens[doc_idx]
    denom_norm = K1 * (1.0 - B + B * dl / stats.avg_doc_len)
    total = 0.0
    for term in query_tokens:
        f = tf.get(term, 0)
        if f == 0:
            continue
        total += idf(stats, term) * (f * (K1 + 1.0)) / (f + denom_norm)
    return total


def bm25_rank(stats: Bm25Stats, query_text: str, k: int, query_id: str = "") -> RankedRetrieval:
    """Top-k chunks by BM25, ties by ascending chunk_id; zero-score
    documents stay in the ranking (in chunk_id order)."""
    if not isinstance(k, int) or k < 1:
        raise ValueError(f"k must be a positive integer, got {k!r}")
    query_tokens = split_tokens(query_text)
    scored = [
        (bm25_score(stats, query_tokens, i), chunk_id)
        for i, chunk_id in enumerate(stats.chunk_ids)
    ]
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return RankedRetrieval(
        query_id=query_id,
        ranked=[(chunk_id, s) for s, chunk_id in scored[: min(k, len(scored))]],
    )


def mine_hard_negatives(stats: Bm25Stats, query_text: str, gt_ids, n: int) -> list[str]:
    """Top-n BM25 chunk ids for the query, ground truth excluded."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    gt = set(gt_ids)
    ranking = bm25_rank(stats, query_text, stats.doc_count)
    return [chunk_id for chunk_id in ranking.ids() if chunk_id not in gt][:n]


class Bm25Retriever(BaseEstimator):
    """Estimator front for the BM25 baseline: fit on a ChunkSet, rank
    query strings."""

    def __init__(self, k: int = 20):
        self.k = k

    def fit(self, X: ChunkSet, y=None) -> "Bm25Retriever":
        self.stats_ = bm25_build(X)
        return self

    def query(self, text: str, k: int | None = None, query_id: str = "") -> RankedRetrieval:
        if not hasattr(self, "stats_"):
            raise NotFittedError("Bm25Retriever is not fitted; call fit() first")
        return bm25_rank(self.stats_, text, k if k is not None else self.k, query_id)

    def predict(self, X) -> list[list[str]]:
        return [self.query(text).ids() for text in X]
