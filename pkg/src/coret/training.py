"""Retrieval-likelihood training for the toy embedder.

The objective is the negative mean log-likelihood of each ground-truth
chunk against a sampled normalizer: for every positive, the candidate set
is that positive plus one shared batch B of sampled negatives, scored by
cosine similarity divided by a temperature. B never contains ground truth.
Gradients are derived by hand (no autograd): softmax on the similarity
logits, cosine through the l2 normalization, mean pooling down to
projection rows and segment offsets.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .callgraph import ContextualizedChunk
from .chunking import Chunk, ChunkSet
from .embedding import (
    DEFAULT_DIM,
    DEFAULT_MAX_TOKENS,
    DEFAULT_VOCAB_SIZE,
    ToyEmbedderParams,
    cosine,
    encode,
    init_toy_params,
    toy_embed,
)
from .lexical import Bm25Stats, mine_hard_negatives
from .metrics import recall_at_k
from .retrieval import RankedRetrieval

NEGATIVE_SOURCES = ("in_instance", "across_instance", "in_instance_plus_bm25")

HISTORY_KS = (5, 20)


@dataclass
class TrainingConfig:
    tau: float = 0.05
    num_negatives: int = 1024
    negative_source: str = "in_instance"
    bm25_negatives: int = 0
    learning_rate: float = 5e-4
    epochs: int = 4
    batch_size: int = 8
    rng_seed: int = 0
    use_call_graph_context: bool = False
    holdout_fraction: float = 0.2
    vocab_size: int = DEFAULT_VOCAB_SIZE
    dim: int = DEFAULT_DIM
    max_tokens: int = DEFAULT_MAX_TOKENS

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.num_negatives < 0:
            raise ValueError("num_negatives must be >= 0")
        if self.negative_source not in NEGATIVE_SOURCES:
            raise ValueError(
                f"negative_source must be one of {NEGATIVE_SOURCES}, "
                f"got {self.negative_source!r}"
            )
        if self.bm25_negatives < 0:
            raise ValueError("bm25_negatives must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")


@dataclass
class TrainingInstance:
    """One (query, repo chunk set, ground-truth ids) triple; contexts, when
    present, replace rendered_text as the embedded candidate text."""

    query_text: str
    chunk_set: ChunkSet
    gt_ids: set[str]
    instance_id: str = ""
    contexts: dict[str, ContextualizedChunk] | None = None

    def validate(self) -> None:
        if not self.gt_ids:
            raise ValueError(f"instance {self.instance_id!r} has empty gt_ids")
        missing = [g for g in self.gt_ids if g not in self.chunk_set]
        if missing:
            raise ValueError(
                f"instance {self.instance_id!r}: gt_ids not in chunk set: {missing}"
            )


@dataclass
class LossReport:
    value: float
    log_probs: dict[str, float]
    negative_ids: list[str]
    grad_norm: float
    grad_projection: np.ndarray | None = field(default=None, repr=False)
    grad_segment_offsets: np.ndarray | None = field(default=None, repr=False)


def candidate_text(instance: TrainingInstance, chunk_id: str):
    """Text + segment spans embedded for a candidate chunk of the instance."""
    if instance.contexts is not None and chunk_id in instance.contexts:
        ctx = instance.contexts[chunk_id]
        return ctx.context_text, ctx.segment_spans
    return instance.chunk_set.get(chunk_id).rendered_text, None


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from string parts; keeps per-instance RNG streams
    independent of batch schedule."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


# --- negative sampling ------------------------------------------------------


def sample_negatives(
    instance: TrainingInstance,
    n: int,
    source: str,
    rng: np.random.Generator,
    bm25_stats: Bm25Stats | None = None,
    others: list[TrainingInstance] | None = None,
    bm25_count: int = 1,
) -> list[Chunk]:
    """Sampled negative chunks; never contains a ground-truth id.

    in_instance: uniform without replacement from the instance's non-GT
    chunks. across_instance: uniform from other instances' chunk pools
    (requires `others`). in_instance_plus_bm25: `bm25_count` BM25-mined
    hard negatives first, uniform in-instance fill, deduplicated.
    """
    if source not in NEGATIVE_SOURCES:
        raise ValueError(f"unknown negative source {source!r}")
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return []
    gt = set(instance.gt_ids)

    if source == "across_instance":
        if not others:
            raise ValueError("across_instance sampling needs >=2 instances")
        pool = [
            c
            for other in others
            for c in other.chunk_set.chunks
            if c.chunk_id not in gt
        ]
        take = min(n, len(pool))
        picks = rng.choice(len(pool), size=take, replace=False) if pool else []
        return [pool[i] for i in picks]

    pool = [c for c in instance.chunk_set.chunks if c.chunk_id not in gt]
    if source == "in_instance":
        take = min(n, len(pool))
        picks = rng.choice(len(pool), size=take, replace=False) if pool else []
        return [pool[i] for i in picks]

    # in_instance_plus_bm25
    if bm25_stats is None:
        raise ValueError("in_instance_plus_bm25 sampling needs bm25_stats")
    hard_ids = []
    if bm25_count > 0:
        hard_ids = mine_hard_negatives(
            bm25_stats, instance.query_text, gt, min(bm25_count, n)
        )
    chosen = [instance.chunk_set.get(cid) for cid in hard_ids]
    seen = set(hard_ids)
    rest_pool = [c for c in pool if c.chunk_id not in seen]
    fill = min(n - len(chosen), len(rest_pool))
    if fill > 0:
        picks = rng.choice(len(rest_pool), size=fill, replace=False)
        chosen.extend(rest_pool[i] for i in picks)
    return chosen


# --- loss and gradients -----------------------------------------------------


def _logsumexp(values: np.ndarray) -> float:
    m = float(np.max(values))
    return m + math.log(float(np.sum(np.exp(values - m))))


@dataclass
class _Encoded:
    ids: np.ndarray
    kinds: np.ndarray


def _encode_text(params: ToyEmbedderParams, text: str, spans=None) -> _Encoded:
    ids, kinds = encode(text, params.vocab_size, spans, params.max_tokens)
    if not ids:
        raise ValueError("empty input: text has no tokens")
    return _Encoded(np.asarray(ids, dtype=np.int64), np.asarray(kinds, dtype=np.int64))


def _forward(params: ToyEmbedderParams, enc: _Encoded):
    rows = params.projection[enc.ids] + params.segment_offsets[enc.kinds]
    pooled = rows.mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    if norm < 1e-12:
        raise ValueError("degenerate embedding: zero vector before normalization")
    return pooled / norm, norm


def _backward_text(
    grad_projection: np.ndarray,
    grad_offsets: np.ndarray,
    enc: _Encoded,
    unit: np.ndarray,
    norm: float,
    grad_unit: np.ndarray,
) -> None:
    """Scatter the gradient wrt one text's unit embedding onto the params.

    d(unit)/d(pooled) projects out the radial component; pooling spreads
    1/T onto each token row and segment offset."""
    grad_pooled = (grad_unit - float(grad_unit @ unit) * unit) / norm
    per_token = grad_pooled / len(enc.ids)
    np.add.at(grad_projection, enc.ids, per_token)
    np.add.at(grad_offsets, enc.kinds, per_token)


def _loss_core(
    params: ToyEmbedderParams,
    enc_query: _Encoded,
    positive_encs: list[_Encoded],
    negative_encs: list[_Encoded],
    tau: float,
    compute_grads: bool,
):
    """Loss value, per-positive log-probs, and (optionally) parameter
    gradients, from pre-encoded texts."""
    q_unit, q_norm = _forward(params, enc_query)
    pos = [_forward(params, e) for e in positive_encs]
    neg = [_forward(params, e) for e in negative_encs]

    z_pos = np.array([float(q_unit @ u) / tau for u, _ in pos])
    z_neg = np.array([float(q_unit @ u) / tau for u, _ in neg])

    n_pos = len(pos)
    log_probs = np.empty(n_pos)
    # Per-positive candidate set: that positive plus the shared negatives.
    lses = np.empty(n_pos)
    for i in range(n_pos):
        lses[i] = _logsumexp(np.concatenate(([z_pos[i]], z_neg)))
        log_probs[i] = z_pos[i] - lses[i]
    value = float(-np.mean(log_probs))

    if not compute_grads:
        return value, log_probs, None, None, 0.0

    grad_projection = np.zeros_like(params.projection)
    grad_offsets = np.zeros_like(params.segment_offsets)

    # d(value)/dz: positives get (softmax_at_positive - 1)/n_pos; each
    # negative accumulates its softmax mass under every positive's set.
    dz_pos = (np.exp(z_pos - lses) - 1.0) / n_pos
    if len(z_neg):
        dz_neg = np.exp(z_neg[None, :] - lses[:, None]).sum(axis=0) / n_pos
    else:
        dz_neg = np.zeros(0)

    grad_q = np.zeros_like(q_unit)
    for i, (unit, norm) in enumerate(pos):
        grad_q += dz_pos[i] * unit / tau
        _backward_text(
            grad_projection, grad_offsets, positive_encs[i], unit, norm,
            dz_pos[i] * q_unit / tau,
        )
    for j, (unit, norm) in enumerate(neg):
        grad_q += dz_neg[j] * unit / tau
        _backward_text(
            grad_projection, grad_offsets, negative_encs[j], unit, norm,
            dz_neg[j] * q_unit / tau,
        )
    _backward_text(grad_projection, grad_offsets, enc_query, q_unit, q_norm, grad_q)

    grad_norm = float(
        np.sqrt(np.sum(grad_projection**2) + np.sum(grad_offsets**2))
    )
    return value, log_probs, grad_projection, grad_offsets, grad_norm


def instance_loss(
    params: ToyEmbedderParams,
    instance: TrainingInstance,
    negatives: list[Chunk],
    tau: float = 0.05,
    compute_grads: bool = True,
) -> LossReport:
    """Negative mean log-likelihood of the instance's positives against the
    sampled negatives. Exactly 0 when `negatives` is empty."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    instance.validate()
    gt = set(instance.gt_ids)
    overlap = [c.chunk_id for c in negatives if c.chunk_id in gt]
    if overlap:
        raise ValueError(f"negatives contain ground-truth ids: {overlap}")

    positives = sorted(gt)
    enc_query = _encode_text(params, instance.query_text)
    positive_encs = [
        _encode_text(params, *candidate_text(instance, cid)) for cid in positives
    ]
    negative_encs = []
    for chunk in negatives:
        if chunk.chunk_id in instance.chunk_set:
            text, spans = candidate_text(instance, chunk.chunk_id)
        else:
            text, spans = chunk.rendered_text, None
        negative_encs.append(_encode_text(params, text, spans))

    value, log_probs, grad_p, grad_o, grad_norm = _loss_core(
        params, enc_query, positive_encs, negative_encs, tau, compute_grads
    )
    if not math.isfinite(value):
        raise ValueError(
            f"non-finite loss on instance {instance.instance_id!r}: {value}"
        )
    return LossReport(
        value=value,
        log_probs={cid: float(lp) for cid, lp in zip(positives, log_probs)},
        negative_ids=[c.chunk_id for c in negatives],
        grad_norm=grad_norm,
        grad_projection=grad_p,
        grad_segment_offsets=grad_o,
    )


def full_normalizer_loss(
    params: ToyEmbedderParams, instance: TrainingInstance, tau: float = 0.05
) -> float:
    """Loss with the exact normalizer summed over every chunk of the
    instance (oracle for the sampled form). Deliberately direct: embeds
    each candidate and evaluates the formula term by term."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    instance.validate()
    q = toy_embed(params, instance.query_text)
    z = {}
    for chunk in instance.chunk_set.chunks:
        text, spans = candidate_text(instance, chunk.chunk_id)
        z[chunk.chunk_id] = cosine(q, toy_embed(params, text, spans)) / tau
    all_z = np.array([z[cid] for cid in instance.chunk_set.ids()])
    lse = _logsumexp(all_z)
    total = 0.0
    for cid in sorted(instance.gt_ids):
        total += lse - z[cid]
    value = total / len(instance.gt_ids)
    if not math.isfinite(value):
        raise ValueError(
            f"non-finite loss on instance {instance.instance_id!r}: {value}"
        )
    return value


# --- training loop ----------------------------------------------------------


class _InstanceCache:
    """Pre-encoded texts of one instance (token ids never change during
    training; only the projection does)."""

    def __init__(self, params: ToyEmbedderParams, instance: TrainingInstance):
        self.instance = instance
        self.enc_query = _encode_text(params, instance.query_text)
        self.enc_by_id: dict[str, _Encoded] = {}
        for chunk in instance.chunk_set.chunks:
            text, spans = candidate_text(instance, chunk.chunk_id)
            self.enc_by_id[chunk.chunk_id] = _encode_text(params, text, spans)


def _rank_candidates(
    params: ToyEmbedderParams, cache: _InstanceCache
) -> RankedRetrieval:
    q_unit, _ = _forward(params, cache.enc_query)
    ids = cache.instance.chunk_set.ids()
    scores = np.array(
        [float(q_unit @ _forward(params, cache.enc_by_id[cid])[0]) for cid in ids]
    )
    order = np.lexsort((np.array(ids), -scores))
    return RankedRetrieval(
        query_id=cache.instance.instance_id,
        ranked=[(ids[i], float(scores[i])) for i in order],
    )


def evaluate_recalls(
    params: ToyEmbedderParams, instances: list[TrainingInstance], ks=HISTORY_KS
) -> dict[int, float]:
    """Mean recall@k of per-instance candidate ranking under `params`."""
    caches = [_InstanceCache(params, inst) for inst in instances]
    out = {}
    for k in ks:
        values = [
            recall_at_k(_rank_candidates(params, c), c.instance.gt_ids, k)
            for c in caches
        ]
        out[k] = float(np.mean(values)) if values else float("nan")
    return out


def split_dataset(
    dataset: list[TrainingInstance], cfg: TrainingConfig
) -> tuple[list[TrainingInstance], list[TrainingInstance]]:
    """Deterministic (train, holdout) split derived from cfg.rng_seed.

    The holdout is empty only when cfg.holdout_fraction rounds to zero;
    at least one instance always stays in the training split.
    """
    split_rng = np.random.default_rng(derive_seed(cfg.rng_seed, "split"))
    order = split_rng.permutation(len(dataset))
    n_hold = int(round(cfg.holdout_fraction * len(dataset)))
    n_hold = min(n_hold, len(dataset) - 1)
    holdout = [dataset[i] for i in order[:n_hold]]
    train_set = [dataset[i] for i in order[n_hold:]]
    return train_set, holdout


def train_toy(
    dataset: list[TrainingInstance],
    cfg: TrainingConfig,
    params0: ToyEmbedderParams | None = None,
    bm25_stats_by_id: dict[str, Bm25Stats] | None = None,
) -> tuple[ToyEmbedderParams, list[dict]]:
    """Gradient descent with cosine learning-rate decay over the dataset.

    Returns trained params and a history with one row per epoch:
    {"epoch", "mean_loss", "recall@5", "recall@20"} (recalls on a held-out
    split; the whole set doubles as the split when there is one instance).
    Negative draws are seeded per (rng_seed, epoch, instance), so results
    do not depend on batch scheduling. A non-finite batch loss aborts and
    returns the last epoch-boundary snapshot.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("train_toy needs a non-empty dataset")
    for inst in dataset:
        inst.validate()
    if cfg.use_call_graph_context:
        missing = [i.instance_id for i in dataset if i.contexts is None]
        if missing:
            raise ValueError(
                f"use_call_graph_context=True but instances lack contexts: {missing[:3]}"
            )

    params = params0 if params0 is not None else init_toy_params(
        cfg.vocab_size, cfg.dim, cfg.max_tokens, seed=cfg.rng_seed
    )
    params.validate()

    train_set, holdout = split_dataset(dataset, cfg)
    eval_set = holdout if holdout else train_set

    caches = {id(inst): _InstanceCache(params, inst) for inst in dataset}
    inst_keys = {
        id(inst): (inst.instance_id or f"#{i}") for i, inst in enumerate(dataset)
    }
    foreign_encs: dict[int, _Encoded] = {}

    def _neg_encs(inst: TrainingInstance, negatives: list[Chunk]) -> list[_Encoded]:
        cache = caches[id(inst)]
        encs = []
        for chunk in negatives:
            enc = cache.enc_by_id.get(chunk.chunk_id)
            if enc is None or chunk.chunk_id not in inst.chunk_set:
                key = id(chunk)
                if key not in foreign_encs:
                    foreign_encs[key] = _encode_text(params, chunk.rendered_text)
                enc = foreign_encs[key]
            encs.append(enc)
        return encs

    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    history: list[dict] = []
    step = 0
    snapshot = (params.projection.copy(), params.segment_offsets.copy())

    for epoch in range(cfg.epochs):
        epoch_rng = np.random.default_rng(derive_seed(cfg.rng_seed, "order", epoch))
        epoch_order = epoch_rng.permutation(len(train_set))
        loss_sum, loss_count = 0.0, 0
        aborted = False

        for start in range(0, len(epoch_order), cfg.batch_size):
            batch_idx = epoch_order[start : start + cfg.batch_size]
            batch = [train_set[i] for i in batch_idx]
            grad_p = np.zeros_like(params.projection)
            grad_o = np.zeros_like(params.segment_offsets)
            batch_loss = 0.0

            for inst in batch:
                key = inst_keys[id(inst)]
                rng = np.random.default_rng(derive_seed(cfg.rng_seed, "neg", epoch, key))
                stats = None
                if cfg.negative_source == "in_instance_plus_bm25":
                    if bm25_stats_by_id is None or key not in bm25_stats_by_id:
                        raise ValueError(
                            f"bm25 stats required for instance {inst.instance_id!r}"
                        )
                    stats = bm25_stats_by_id[key]
                others = [b for b in batch if b is not inst]
                negatives = sample_negatives(
                    inst, cfg.num_negatives, cfg.negative_source, rng,
                    bm25_stats=stats, others=others, bm25_count=cfg.bm25_negatives,
                )
                cache = caches[id(inst)]
                pos_ids = sorted(inst.gt_ids)
                value, _, g_p, g_o, _ = _loss_core(
                    params,
                    cache.enc_query,
                    [cache.enc_by_id[cid] for cid in pos_ids],
                    _neg_encs(inst, negatives),
                    cfg.tau,
                    compute_grads=True,
                )
                batch_loss += value / len(batch)
                grad_p += g_p / len(batch)
                grad_o += g_o / len(batch)
                loss_sum += value
                loss_count += 1

            if not (
                math.isfinite(batch_loss)
                and np.all(np.isfinite(grad_p))
                and np.all(np.isfinite(grad_o))
            ):
                params.projection[...] = snapshot[0]
                params.segment_offsets[...] = snapshot[1]
                aborted = True
                break

            lr_t = cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            params.projection -= lr_t * grad_p
            params.segment_offsets -= lr_t * grad_o
            step += 1

        if aborted:
            break
        recalls = evaluate_recalls(params, eval_set, HISTORY_KS)
        history.append(
            {
                "epoch": epoch,
                "mean_loss": loss_sum / max(1, loss_count),
                "recall@5": recalls[5],
                "recall@20": recalls[20],
            }
        )
        snapshot = (params.projection.copy(), params.segment_offsets.copy())

    return params, history


# --- training config file ---------------------------------------------------

_CONFIG_FIELDS = {f: t for f, t in TrainingConfig.__annotations__.items()}


def load_training_config(path) -> TrainingConfig:
    """Flat key/value file: one `key = value` (or `key: value`) per line,
    `#` comments; keys mirror TrainingConfig fields."""
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            for sep in ("=", ":"):
                if sep in line:
                    key, _, val = line.partition(sep)
                    break
            else:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key = key.strip()
            val = val.strip()
            if key not in _CONFIG_FIELDS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            annotation = _CONFIG_FIELDS[key]
            if annotation == "bool":
                if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"{path}:{lineno}: bad boolean {val!r}")
                values[key] = val.lower() in ("true", "1", "yes")
            elif annotation == "int":
                values[key] = int(val)
            elif annotation == "float":
                values[key] = float(val)
            else:
                values[key] = val
    cfg = TrainingConfig(**values)
    cfg.validate()
    return cfg


def save_training_config(cfg: TrainingConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key in _CONFIG_FIELDS:
            f.write(f"{key} = {getattr(cfg, key)}\n")
