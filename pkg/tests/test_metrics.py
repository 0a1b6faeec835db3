"""Recall@k, MRR, Perfect-Recall@k at chunk and file level, plus evaluate()."""

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coret.chunking import Chunk, ChunkSet
from coret.metrics import (
    LEVELS,
    METRICS,
    evaluate,
    file_level,
    mrr,
    perfect_recall_at_k,
    recall_at_k,
)
from coret.retrieval import RankedRetrieval


def _ranking(ids, query_id="q"):
    # Strictly decreasing scores so any id order is a valid ranking.
    return RankedRetrieval(query_id, [(cid, 1.0 - i * 0.01) for i, cid in enumerate(ids)])


def _chunk(cid, path):
    return Chunk(
        chunk_id=cid,
        kind="function",
        qualified_name=cid,
        file_path=path,
        line_start=1,
        line_end=1,
        body_text="x",
        rendered_text="x",
    )


# --- direct-definition oracles ------------------------------------------------


def _oracle_recall(ids, gt, k):
    return sum(1 for g in set(gt) if g in ids[:k]) / len(set(gt))


def _oracle_mrr(ids, gt):
    gt = set(gt)
    for i, cid in enumerate(ids):
        if cid in gt:
            return 1.0 / (i + 1)
    return 0.0


def _oracle_perfect(ids, gt, k):
    return 1 if set(gt).issubset(ids[:k]) else 0


# --- hand values ---------------------------------------------------------------


def test_recall_hand_values():
    ids = [f"c{i}" for i in range(25)]
    ranked = _ranking(ids)
    # 3 of 4 GT inside the top 20.
    assert recall_at_k(ranked, ["c0", "c5", "c19", "c24"], 20) == 0.75
    # All GT at the head.
    assert recall_at_k(ranked, ["c0", "c1"], 5) == 1.0
    # None in the cut-off.
    assert recall_at_k(ranked, ["c24"], 5) == 0.0
    # GT ids absent from the ranking entirely count as misses.
    assert recall_at_k(ranked, ["c0", "nowhere"], 5) == 0.5


def test_mrr_hand_values():
    ids = [f"c{i}" for i in range(10)]
    ranked = _ranking(ids)
    assert mrr(ranked, ["c3"]) == 0.25
    assert mrr(ranked, ["c0", "c9"]) == 1.0
    assert mrr(ranked, ["absent"]) == 0.0


def test_perfect_recall_hand_values():
    ranked = _ranking(["a", "x", "b", "y", "z"])
    assert perfect_recall_at_k(ranked, ["a", "b"], 5) == 1
    assert perfect_recall_at_k(ranked, ["a", "b"], 2) == 0
    assert perfect_recall_at_k(ranked, ["a", "missing"], 5) == 0
    # k below |GT| can never be perfect.
    assert perfect_recall_at_k(ranked, ["a", "b", "y"], 2) == 0


def test_empty_gt_rejected():
    ranked = _ranking(["a", "b"])
    chunks = ChunkSet(repo_id="r", chunks=[_chunk("a", "f.py"), _chunk("b", "g.py")])
    for call in (
        lambda: recall_at_k(ranked, [], 1),
        lambda: mrr(ranked, []),
        lambda: perfect_recall_at_k(ranked, [], 1),
        lambda: file_level(ranked, [], chunks, 1, "recall"),
    ):
        with pytest.raises(ValueError):
            call()


def test_bad_k_rejected():
    ranked = _ranking(["a"])
    with pytest.raises(ValueError):
        recall_at_k(ranked, ["a"], 0)
    with pytest.raises(ValueError):
        perfect_recall_at_k(ranked, ["a"], -1)


# --- file level ----------------------------------------------------------------


@pytest.fixture()
def file_fixture():
    chunks = ChunkSet(
        repo_id="r",
        chunks=[
            _chunk("a1", "a.py"),
            _chunk("a2", "a.py"),
            _chunk("a3", "a.py"),
            _chunk("b1", "b.py"),
            _chunk("b2", "b.py"),
            _chunk("c1", "c.py"),
        ],
    )
    return chunks


def test_file_recall(file_fixture):
    # GT spans two files; the top-k covers only one of them.
    ranked = _ranking(["a1", "a2", "c1"])
    assert file_level(ranked, ["a3", "b1"], file_fixture, 3, "recall") == 0.5
    # All chunks from one file, GT in that file.
    ranked = _ranking(["a1", "a2", "a3"])
    assert file_level(ranked, ["a2"], file_fixture, 3, "recall") == 1.0


def test_file_mrr_dedup_then_rank(file_fixture):
    # Six ranked chunks: a1 a2 b1 a3 c1 b2. Deduplicated file sequence is
    # [a.py, b.py, c.py]; the first GT file (b.py) sits at file rank 2, so
    # MRR is 1/2 — not 1/3, which the raw chunk rank of b1 would give.
    ranked = _ranking(["a1", "a2", "b1", "a3", "c1", "b2"])
    assert file_level(ranked, ["b2"], file_fixture, 6, "mrr") == 0.5
    # GT file at the head of the file sequence.
    assert file_level(ranked, ["a3"], file_fixture, 6, "mrr") == 1.0
    # c.py is the 3rd distinct file (chunk rank 5).
    assert file_level(ranked, ["c1"], file_fixture, 6, "mrr") == pytest.approx(1 / 3)


def test_file_perfect(file_fixture):
    ranked = _ranking(["a1", "b1", "c1"])
    assert file_level(ranked, ["a2", "b2"], file_fixture, 3, "perfect") == 1.0
    assert file_level(ranked, ["a2", "b2"], file_fixture, 1, "perfect") == 0.0


def test_file_level_cutoff_applies_to_chunks(file_fixture):
    # k counts chunks before dedup: top-2 chunks cover only a.py.
    ranked = _ranking(["a1", "a2", "b1"])
    assert file_level(ranked, ["b1"], file_fixture, 2, "recall") == 0.0
    assert file_level(ranked, ["b1"], file_fixture, 3, "recall") == 1.0


def test_file_level_unresolvable_id(file_fixture):
    ranked = _ranking(["a1", "ghost"])
    with pytest.raises(KeyError):
        file_level(ranked, ["a1"], file_fixture, 2, "recall")
    with pytest.raises(KeyError):
        file_level(_ranking(["a1"]), ["ghost"], file_fixture, 1, "recall")


def test_file_level_unknown_metric(file_fixture):
    with pytest.raises(ValueError):
        file_level(_ranking(["a1"]), ["a1"], file_fixture, 1, "ndcg")


# --- properties ------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(data=st.data())
def test_metrics_match_oracles_on_random_rankings(data):
    n = data.draw(st.integers(2, 30))
    ids = [f"c{i:02d}" for i in range(n)]
    perm = data.draw(st.permutations(ids))
    gt = data.draw(st.lists(st.sampled_from(ids), min_size=1, max_size=4, unique=True))
    k = data.draw(st.integers(1, n))
    ranked = _ranking(list(perm))
    assert recall_at_k(ranked, gt, k) == pytest.approx(_oracle_recall(list(perm), gt, k))
    assert mrr(ranked, gt) == pytest.approx(_oracle_mrr(list(perm), gt))
    assert perfect_recall_at_k(ranked, gt, k) == _oracle_perfect(list(perm), gt, k)


@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_recall_monotone_in_k_and_extremes_coincide(data):
    n = data.draw(st.integers(2, 20))
    ids = [f"c{i:02d}" for i in range(n)]
    perm = list(data.draw(st.permutations(ids)))
    gt = data.draw(st.lists(st.sampled_from(ids), min_size=1, max_size=5, unique=True))
    ranked = _ranking(perm)
    recalls = [recall_at_k(ranked, gt, k) for k in range(1, n + 1)]
    perfects = [perfect_recall_at_k(ranked, gt, k) for k in range(1, n + 1)]
    assert recalls == sorted(recalls)
    assert perfects == sorted(perfects)
    for r, p in zip(recalls, perfects):
        # The two metrics hit 1 together.
        assert (r == 1.0) == (p == 1)


# --- evaluate ---------------------------------------------------------------------


def _instances():
    chunks = ChunkSet(
        repo_id="r",
        chunks=[_chunk(c, f"{c[0]}.py") for c in ("a1", "a2", "b1", "b2")],
    )
    inst1 = SimpleNamespace(instance_id="i1", gt_ids=["a1"], chunk_set=chunks)
    inst2 = SimpleNamespace(instance_id="i2", gt_ids=["b1", "b2"], chunk_set=chunks)
    rankings = {
        "i1": _ranking(["a1", "a2", "b1", "b2"]),  # GT first
        "i2": _ranking(["a1", "b1", "a2", "b2"]),  # GT at ranks 2 and 4
    }
    return [inst1, inst2], rankings


def test_evaluate_rows_and_aggregates():
    instances, rankings = _instances()
    result = evaluate(instances, rankings, ks=[2, 4], levels=("chunk", "file"))
    assert result.instance_count == 2
    # recall@2: i1 = 1.0, i2 = 0.5 -> mean 0.75; recall@4: both 1.0.
    assert result.aggregate("recall", 2) == 0.75
    assert result.aggregate("recall", 4) == 1.0
    # perfect@2: i1 = 1, i2 = 0; perfect@4: both 1.
    assert result.aggregate("perfect", 2) == 0.5
    assert result.aggregate("perfect", 4) == 1.0
    # mrr: i1 = 1.0, i2 = 0.5 -> 0.75; k stored as None.
    assert result.aggregate("mrr") == 0.75
    # File level: i2's ranking dedups to [a.py, b.py] -> file mrr 0.5.
    assert result.aggregate("mrr", level="file") == 0.75
    row_keys = {(r[0], r[1], r[2], r[3]) for r in result.rows}
    assert ("i1", "chunk", "recall", 2) in row_keys
    assert ("i2", "file", "mrr", None) in row_keys
    # Exactly: 2 instances x 2 levels x (2 metrics x 2 ks + mrr).
    assert len(result.rows) == 2 * 2 * (2 * 2 + 1)


def test_evaluate_carries_exact_ks():
    instances, rankings = _instances()
    result = evaluate(instances, rankings, ks=[5, 20])
    ks_seen = {r[3] for r in result.rows if r[2] == "recall"}
    assert ks_seen == {5, 20}


def test_evaluate_missing_ranking_names_instance():
    instances, rankings = _instances()
    del rankings["i2"]
    with pytest.raises(KeyError, match="i2"):
        evaluate(instances, rankings, ks=[1])


def test_evaluate_validates_arguments():
    instances, rankings = _instances()
    with pytest.raises(ValueError):
        evaluate(instances, rankings, ks=[])
    with pytest.raises(ValueError):
        evaluate(instances, rankings, ks=[1], metrics=("ndcg",))
    with pytest.raises(ValueError):
        evaluate(instances, rankings, ks=[1], levels=("module",))


def test_evaluate_deterministic():
    instances, rankings = _instances()
    a = evaluate(instances, rankings, ks=[1, 3], levels=("chunk", "file"))
    b = evaluate(instances, rankings, ks=[1, 3], levels=("chunk", "file"))
    assert a.rows == b.rows and a.aggregates == b.aggregates


def test_evaluate_values_in_unit_interval():
    instances, rankings = _instances()
    result = evaluate(instances, rankings, ks=[1, 2, 3, 4], levels=LEVELS, metrics=METRICS)
    assert all(0.0 <= row[4] <= 1.0 for row in result.rows)
    mean = np.mean([r[4] for r in result.rows if r[2] == "recall" and r[3] == 2 and r[1] == "chunk"])
    assert result.aggregate("recall", 2) == pytest.approx(mean)
