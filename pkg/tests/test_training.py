"""Likelihood loss, hand values, gradient checks, negative sampling, train loop."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coret.chunking import Chunk, ChunkSet
from coret.embedding import (
    ToyEmbedderParams,
    hash_token,
    init_toy_params,
    toy_embed,
)
from coret.lexical import bm25_build
from coret.training import (
    NEGATIVE_SOURCES,
    TrainingConfig,
    TrainingInstance,
    derive_seed,
    evaluate_recalls,
    full_normalizer_loss,
    instance_loss,
    load_training_config,
    sample_negatives,
    save_training_config,
    split_dataset,
    train_toy,
)

from corpus import toy_instances


def _chunk(cid, text, path="f.py"):
    return Chunk(
        chunk_id=cid,
        kind="function",
        qualified_name=cid.split("::")[-1],
        file_path=path,
        line_start=1,
        line_end=1,
        body_text=text,
        rendered_text=text,
    )


def _instance(query, bodies, gt, instance_id="i"):
    chunks = [_chunk(cid, text) for cid, text in bodies.items()]
    return TrainingInstance(
        query_text=query,
        chunk_set=ChunkSet(repo_id="r", chunks=chunks),
        gt_ids=gt,
        instance_id=instance_id,
    )


def _negatives(inst):
    gt = set(inst.gt_ids)
    return [c for c in inst.chunk_set.chunks if c.chunk_id not in gt]


@pytest.fixture(scope="module")
def small_params():
    return init_toy_params(vocab_size=256, dim=8, max_tokens=64, seed=5)


# --- hand values --------------------------------------------------------------


def test_loss_zero_when_no_negatives(small_params):
    inst = _instance("query words", {"f.py::a": "alpha body", "f.py::b": "beta body"},
                     gt=["f.py::a", "f.py::b"])
    report = instance_loss(small_params, inst, negatives=[])
    assert report.value == 0.0
    assert report.log_probs == {"f.py::a": 0.0, "f.py::b": 0.0}
    assert report.negative_ids == []


def test_loss_ln2_on_symmetric_pair(small_params):
    # Positive and negative share the exact text, so their logits tie and
    # the positive gets probability exactly 1/2.
    inst = _instance("whatever query", {"f.py::p": "same body", "f.py::n": "same body"},
                     gt=["f.py::p"])
    report = instance_loss(small_params, inst, [inst.chunk_set.get("f.py::n")], tau=1.0)
    assert report.value == pytest.approx(math.log(2), abs=1e-12)


def _hand_params():
    """dim-2 params with three tokens pinned to known unit vectors."""
    V = 16
    # aa, bb, cc hash to distinct ids modulo 16 (7, 5, 3).
    ids = {w: hash_token(w, V) for w in ("aa", "bb", "cc")}
    assert len(set(ids.values())) == 3
    proj = np.zeros((V + 1, 2))
    proj[ids["aa"]] = [1.0, 0.0]  # query
    proj[ids["bb"]] = [1.0, 0.0]  # positive, cosine 1 with query
    proj[ids["cc"]] = [0.0, 1.0]  # negative, cosine 0 with query
    return (
        ToyEmbedderParams(
            vocab_size=V, dim=2, max_tokens=8, seed=0,
            projection=proj, segment_offsets=np.zeros((2, 2)),
        ),
        ids,
    )


def test_loss_two_term_softmax_hand_value():
    # z_+ = 1, z_- = 0 at tau=1 -> loss = ln(1 + e^{-1}).
    params, _ = _hand_params()
    inst = _instance("aa", {"f.py::p": "bb", "f.py::n": "cc"}, gt=["f.py::p"])
    report = instance_loss(params, inst, [inst.chunk_set.get("f.py::n")], tau=1.0)
    assert report.value == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)


def test_full_normalizer_sums_over_all_chunks_when_all_gt(small_params):
    # Both chunks are ground truth: the sampled loss has no negatives left
    # (0 exactly), while the exact normalizer still spans the whole repo.
    inst = _instance("query text", {"f.py::a": "alpha body", "f.py::b": "beta body"},
                     gt=["f.py::a", "f.py::b"])
    assert instance_loss(small_params, inst, []).value == 0.0
    full = full_normalizer_loss(small_params, inst, tau=0.05)
    q = toy_embed(small_params, inst.query_text)
    z = {
        c.chunk_id: float(q @ toy_embed(small_params, c.rendered_text)) / 0.05
        for c in inst.chunk_set.chunks
    }
    lse = math.log(sum(math.exp(v - max(z.values())) for v in z.values())) + max(z.values())
    want = np.mean([lse - z[cid] for cid in sorted(inst.gt_ids)])
    assert full == pytest.approx(want, abs=1e-12)
    assert full > 0.0


def test_full_normalizer_limit_is_ln_n(small_params):
    # tau -> infinity flattens the softmax: loss -> ln |C| for one positive.
    bodies = {f"f.py::c{i}": f"body text number {i}" for i in range(4)}
    inst = _instance("query", bodies, gt=["f.py::c0"])
    assert full_normalizer_loss(small_params, inst, tau=1e6) == pytest.approx(
        math.log(4), abs=1e-5
    )


def test_sampled_equals_full_normalizer_single_gt(small_params):
    # With B = C \ C* and one positive, the candidate set is all of C.
    for inst in toy_instances(20, seed=21, min_chunks=4, max_chunks=12, max_gt=1):
        sampled = instance_loss(
            small_params, inst, _negatives(inst), tau=0.05, compute_grads=False
        )
        assert sampled.value == pytest.approx(
            full_normalizer_loss(small_params, inst, tau=0.05), abs=1e-9
        )


def test_sampled_at_most_full_normalizer_multi_gt(small_params):
    # With several positives, B = C \ C* drops the other positives from each
    # normalizer, so the sampled loss can only be lower.
    seen_multi = 0
    for inst in toy_instances(20, seed=22, min_chunks=6, max_chunks=12, max_gt=3):
        if len(inst.gt_ids) < 2:
            continue
        seen_multi += 1
        sampled = instance_loss(
            small_params, inst, _negatives(inst), tau=0.05, compute_grads=False
        ).value
        assert sampled <= full_normalizer_loss(small_params, inst, tau=0.05) + 1e-12
    assert seen_multi >= 5


# --- validation ----------------------------------------------------------------


def test_loss_rejects_gt_in_negatives(small_params):
    inst = _instance("q", {"f.py::a": "alpha", "f.py::b": "beta"}, gt=["f.py::a"])
    with pytest.raises(ValueError, match="ground-truth"):
        instance_loss(small_params, inst, [inst.chunk_set.get("f.py::a")])


def test_loss_rejects_bad_tau(small_params):
    inst = _instance("q", {"f.py::a": "alpha"}, gt=["f.py::a"])
    with pytest.raises(ValueError):
        instance_loss(small_params, inst, [], tau=0.0)
    with pytest.raises(ValueError):
        full_normalizer_loss(small_params, inst, tau=-1.0)


def test_instance_validation(small_params):
    empty_gt = _instance("q", {"f.py::a": "alpha"}, gt=[])
    with pytest.raises(ValueError, match="empty gt_ids"):
        instance_loss(small_params, empty_gt, [])
    missing = _instance("q", {"f.py::a": "alpha"}, gt=["f.py::ghost"])
    with pytest.raises(ValueError, match="not in chunk set"):
        instance_loss(small_params, missing, [])


# --- loss properties -------------------------------------------------------------


def test_loss_positive_with_nonempty_b(small_params):
    for inst in toy_instances(10, seed=30, min_chunks=4, max_chunks=10):
        negs = _negatives(inst)
        assert instance_loss(small_params, inst, negs, compute_grads=False).value > 0.0


def test_loss_monotone_in_negatives(small_params):
    for inst in toy_instances(8, seed=31, min_chunks=6, max_chunks=12):
        negs = _negatives(inst)
        values = [
            instance_loss(small_params, inst, negs[:m], compute_grads=False).value
            for m in range(len(negs) + 1)
        ]
        for a, b in zip(values, values[1:]):
            assert b >= a - 1e-12


def test_weight_tying_step_moves_query_side(small_params):
    params = init_toy_params(256, 8, 64, seed=9)
    inst = _instance("query entirely disjoint words",
                     {"f.py::p": "positive anchor body", "f.py::n": "negative filler body"},
                     gt=["f.py::p"])
    report = instance_loss(params, inst, [inst.chunk_set.get("f.py::n")])
    # Probe text reuses only chunk-side tokens; shared weights mean the
    # chunk-driven gradient step must move its (query-side) embedding too.
    probe = "positive anchor body"
    before = toy_embed(params, probe).copy()
    params.projection -= 0.1 * report.grad_projection
    params.segment_offsets -= 0.1 * report.grad_segment_offsets
    after = toy_embed(params, probe)
    assert not np.allclose(before, after)


# --- gradient check --------------------------------------------------------------


def _relative_error(a, b):
    return abs(a - b) / max(1e-8, abs(a), abs(b))


def test_gradient_matches_finite_differences():
    params = init_toy_params(vocab_size=128, dim=6, max_tokens=64, seed=13)
    inst = toy_instances(1, seed=40, min_chunks=5, max_chunks=8)[0]
    negs = _negatives(inst)
    report = instance_loss(params, inst, negs, tau=0.05)

    def value():
        return instance_loss(params, inst, negs, tau=0.05, compute_grads=False).value

    h = 1e-5
    touched_rows = sorted(set(np.nonzero(report.grad_projection)[0]))
    assert touched_rows, "gradient touched no projection rows"
    rng = np.random.default_rng(0)
    coords = [(r, int(rng.integers(0, params.dim))) for r in touched_rows]
    for r, c in coords:
        params.projection[r, c] += h
        up = value()
        params.projection[r, c] -= 2 * h
        down = value()
        params.projection[r, c] += h
        fd = (up - down) / (2 * h)
        assert _relative_error(report.grad_projection[r, c], fd) < 1e-4
    for s in range(2):
        for c in range(params.dim):
            params.segment_offsets[s, c] += h
            up = value()
            params.segment_offsets[s, c] -= 2 * h
            down = value()
            params.segment_offsets[s, c] += h
            fd = (up - down) / (2 * h)
            assert _relative_error(report.grad_segment_offsets[s, c], fd) < 1e-4


def test_grad_norm_consistent(small_params):
    inst = toy_instances(1, seed=41, min_chunks=5, max_chunks=8)[0]
    report = instance_loss(small_params, inst, _negatives(inst))
    want = math.sqrt(
        float(np.sum(report.grad_projection**2))
        + float(np.sum(report.grad_segment_offsets**2))
    )
    assert report.grad_norm == pytest.approx(want, rel=1e-12)
    assert report.grad_norm > 0.0


# --- negative sampling ------------------------------------------------------------


def test_sample_in_instance_properties():
    inst = toy_instances(1, seed=50, min_chunks=10, max_chunks=10)[0]
    rng = np.random.default_rng(7)
    negs = sample_negatives(inst, 5, "in_instance", rng)
    ids = [c.chunk_id for c in negs]
    assert len(ids) == 5 and len(set(ids)) == 5
    assert not set(ids) & set(inst.gt_ids)
    assert all(cid in inst.chunk_set for cid in ids)


def test_sample_clamps_to_pool():
    inst = toy_instances(1, seed=51, min_chunks=6, max_chunks=6)[0]
    pool = len(inst.chunk_set.chunks) - len(inst.gt_ids)
    negs = sample_negatives(inst, 1000, "in_instance", np.random.default_rng(0))
    assert len(negs) == pool
    assert sorted(c.chunk_id for c in negs) == sorted(
        c.chunk_id for c in inst.chunk_set.chunks if c.chunk_id not in set(inst.gt_ids)
    )


def test_sample_deterministic_given_seed():
    inst = toy_instances(1, seed=52, min_chunks=12, max_chunks=12)[0]
    a = sample_negatives(inst, 4, "in_instance", np.random.default_rng(123))
    b = sample_negatives(inst, 4, "in_instance", np.random.default_rng(123))
    assert [c.chunk_id for c in a] == [c.chunk_id for c in b]


def test_sample_zero_and_errors():
    inst = toy_instances(1, seed=53, min_chunks=5, max_chunks=5)[0]
    rng = np.random.default_rng(0)
    assert sample_negatives(inst, 0, "in_instance", rng) == []
    with pytest.raises(ValueError):
        sample_negatives(inst, -1, "in_instance", rng)
    with pytest.raises(ValueError):
        sample_negatives(inst, 3, "nearest_neighbor", rng)


def test_sample_across_instance():
    insts = toy_instances(3, seed=54, min_chunks=6, max_chunks=8)
    rng = np.random.default_rng(1)
    with pytest.raises(ValueError, match="instances"):
        sample_negatives(insts[0], 4, "across_instance", rng, others=[])
    negs = sample_negatives(insts[0], 6, "across_instance", rng, others=insts[1:])
    other_ids = {c.chunk_id for inst in insts[1:] for c in inst.chunk_set.chunks}
    assert len(negs) == 6
    for c in negs:
        assert c.chunk_id in other_ids
        assert c.chunk_id not in set(insts[0].gt_ids)


def test_sample_bm25_hard_first():
    inst = toy_instances(1, seed=55, min_chunks=10, max_chunks=10)[0]
    stats = bm25_build(inst.chunk_set)
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError, match="bm25_stats"):
        sample_negatives(inst, 4, "in_instance_plus_bm25", rng)
    negs = sample_negatives(
        inst, 4, "in_instance_plus_bm25", rng, bm25_stats=stats, bm25_count=1
    )
    ids = [c.chunk_id for c in negs]
    assert len(ids) == 4 and len(set(ids)) == 4
    assert not set(ids) & set(inst.gt_ids)
    # The first id is BM25's top-scoring non-GT chunk for the query.
    from coret.lexical import mine_hard_negatives

    assert ids[0] == mine_hard_negatives(stats, inst.query_text, inst.gt_ids, 1)[0]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(0, 20))
def test_sample_never_contains_gt(seed, n):
    inst = toy_instances(1, seed=56, min_chunks=8, max_chunks=12)[0]
    negs = sample_negatives(inst, n, "in_instance", np.random.default_rng(seed))
    ids = [c.chunk_id for c in negs]
    assert len(set(ids)) == len(ids)
    assert not set(ids) & set(inst.gt_ids)
    assert len(ids) == min(n, len(inst.chunk_set.chunks) - len(inst.gt_ids))


# --- derive_seed / split ------------------------------------------------------------


def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, "neg", 1, "a") == derive_seed(0, "neg", 1, "a")
    assert derive_seed(0, "neg", 1, "a") != derive_seed(0, "neg", 2, "a")
    assert derive_seed(0, "neg", 1, "a") != derive_seed(1, "neg", 1, "a")
    assert 0 <= derive_seed("anything") < 2**64


def test_split_dataset_deterministic_partition():
    data = toy_instances(10, seed=60, min_chunks=4, max_chunks=6)
    cfg = TrainingConfig(holdout_fraction=0.3, rng_seed=4)
    train_a, hold_a = split_dataset(data, cfg)
    train_b, hold_b = split_dataset(data, cfg)
    assert [i.instance_id for i in train_a] == [i.instance_id for i in train_b]
    assert [i.instance_id for i in hold_a] == [i.instance_id for i in hold_b]
    assert len(hold_a) == 3 and len(train_a) == 7
    ids = {i.instance_id for i in train_a} | {i.instance_id for i in hold_a}
    assert ids == {i.instance_id for i in data}


def test_split_dataset_edge_cases():
    data = toy_instances(3, seed=61, min_chunks=4, max_chunks=5)
    train, hold = split_dataset(data, TrainingConfig(holdout_fraction=0.0))
    assert hold == [] and len(train) == 3
    # Never holds out the whole set.
    train, hold = split_dataset(data[:1], TrainingConfig(holdout_fraction=0.9))
    assert len(train) == 1 and hold == []


# --- training loop ------------------------------------------------------------------


def _tiny_cfg(**over):
    base = dict(
        tau=0.05,
        num_negatives=8,
        negative_source="in_instance",
        learning_rate=1e-2,
        epochs=2,
        batch_size=4,
        rng_seed=0,
        vocab_size=512,
        dim=16,
        max_tokens=64,
        holdout_fraction=0.25,
    )
    base.update(over)
    return TrainingConfig(**base)


def test_train_history_shape_and_keys():
    data = toy_instances(8, seed=70, min_chunks=6, max_chunks=10)
    params, history = train_toy(data, _tiny_cfg())
    assert len(history) == 2
    for i, row in enumerate(history):
        assert set(row) == {"epoch", "mean_loss", "recall@5", "recall@20"}
        assert row["epoch"] == i
        assert math.isfinite(row["mean_loss"]) and row["mean_loss"] > 0
        assert 0.0 <= row["recall@5"] <= row["recall@20"] <= 1.0
    params.validate()


def test_train_same_seed_bitwise_identical():
    data = toy_instances(6, seed=71, min_chunks=5, max_chunks=8)
    p1, h1 = train_toy(data, _tiny_cfg())
    p2, h2 = train_toy(data, _tiny_cfg())
    assert h1 == h2
    np.testing.assert_array_equal(p1.projection, p2.projection)
    np.testing.assert_array_equal(p1.segment_offsets, p2.segment_offsets)


def test_train_zero_lr_is_noop():
    data = toy_instances(4, seed=72, min_chunks=5, max_chunks=6)
    params0 = init_toy_params(512, 16, 64, seed=1)
    before = (params0.projection.copy(), params0.segment_offsets.copy())
    trained, history = train_toy(data, _tiny_cfg(learning_rate=0.0, epochs=1), params0=params0)
    np.testing.assert_array_equal(trained.projection, before[0])
    np.testing.assert_array_equal(trained.segment_offsets, before[1])
    assert len(history) == 1


def test_train_negative_draws_independent_of_dataset_order():
    # Per-instance seeds are derived from (rng_seed, epoch, instance_id),
    # so epoch mean loss is order-independent up to summation rounding.
    data = toy_instances(5, seed=73, min_chunks=6, max_chunks=9)
    cfg = _tiny_cfg(epochs=1, batch_size=5, holdout_fraction=0.0)
    _, h_fwd = train_toy(list(data), cfg)
    _, h_rev = train_toy(list(reversed(data)), cfg)
    assert h_fwd[0]["mean_loss"] == pytest.approx(h_rev[0]["mean_loss"], abs=1e-10)


def test_train_validates_inputs():
    data = toy_instances(2, seed=74, min_chunks=4, max_chunks=5)
    with pytest.raises(ValueError):
        train_toy([], _tiny_cfg())
    with pytest.raises(ValueError, match="contexts"):
        train_toy(data, _tiny_cfg(use_call_graph_context=True))
    with pytest.raises(ValueError, match="bm25"):
        train_toy(data, _tiny_cfg(negative_source="in_instance_plus_bm25"))


def test_train_divergence_aborts_and_restores_snapshot():
    # An extreme learning rate overflows the first update; the next batch
    # sees non-finite values and training falls back to the last snapshot.
    data = toy_instances(2, seed=75, min_chunks=6, max_chunks=8)
    params0 = init_toy_params(256, 8, 64, seed=0)
    before = (params0.projection.copy(), params0.segment_offsets.copy())
    cfg = _tiny_cfg(
        tau=1e-3, learning_rate=1e308, epochs=1, batch_size=1,
        num_negatives=4, vocab_size=256, dim=8, holdout_fraction=0.0,
    )
    with np.errstate(over="ignore", invalid="ignore"):
        trained, history = train_toy(data, cfg, params0=params0)
    assert history == []
    np.testing.assert_array_equal(trained.projection, before[0])
    np.testing.assert_array_equal(trained.segment_offsets, before[1])


def test_evaluate_recalls_range():
    data = toy_instances(4, seed=76, min_chunks=6, max_chunks=10)
    params = init_toy_params(512, 16, 64, seed=2)
    recalls = evaluate_recalls(params, data, ks=(5, 20))
    assert set(recalls) == {5, 20}
    assert 0.0 <= recalls[5] <= recalls[20] <= 1.0


# --- config -------------------------------------------------------------------------


def test_config_validate_errors():
    for bad in (
        dict(tau=0.0),
        dict(num_negatives=-1),
        dict(negative_source="triplet"),
        dict(bm25_negatives=-2),
        dict(epochs=0),
        dict(batch_size=0),
        dict(holdout_fraction=1.0),
    ):
        with pytest.raises(ValueError):
            TrainingConfig(**bad).validate()
    assert set(NEGATIVE_SOURCES) == {
        "in_instance",
        "across_instance",
        "in_instance_plus_bm25",
    }


def test_config_round_trip(tmp_path):
    cfg = TrainingConfig(
        tau=0.1,
        num_negatives=64,
        negative_source="in_instance_plus_bm25",
        bm25_negatives=1,
        learning_rate=2e-2,
        epochs=3,
        batch_size=4,
        rng_seed=11,
        use_call_graph_context=True,
        holdout_fraction=0.25,
        vocab_size=1024,
        dim=32,
        max_tokens=128,
    )
    path = tmp_path / "train.cfg"
    save_training_config(cfg, path)
    assert load_training_config(path) == cfg


def test_config_file_syntax(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text(
        "# comment line\n"
        "tau = 0.05\n"
        "epochs: 2\n"
        "use_call_graph_context = yes\n"
        "\n"
        "rng_seed = 7  # trailing comment\n"
    )
    cfg = load_training_config(path)
    assert cfg.tau == 0.05 and cfg.epochs == 2
    assert cfg.use_call_graph_context is True and cfg.rng_seed == 7


def test_config_file_errors(tmp_path):
    bad_key = tmp_path / "a.cfg"
    bad_key.write_text("momentum = 0.9\n")
    with pytest.raises(ValueError, match="unknown config key"):
        load_training_config(bad_key)
    bad_bool = tmp_path / "b.cfg"
    bad_bool.write_text("use_call_graph_context = maybe\n")
    with pytest.raises(ValueError, match="boolean"):
        load_training_config(bad_bool)
    bad_line = tmp_path / "c.cfg"
    bad_line.write_text("just some words\n")
    with pytest.raises(ValueError, match="key = value"):
        load_training_config(bad_line)
    bad_value = tmp_path / "d.cfg"
    bad_value.write_text("tau = -3\n")
    with pytest.raises(ValueError):
        load_training_config(bad_value)
