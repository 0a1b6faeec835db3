"""Repository-level code retrieval: AST chunking, static call-graph
context, dense and BM25 ranking, ranking metrics, and a trainable toy
embedder with a contrastive likelihood loss over in-instance negatives.
"""

__version__ = "0.1.0"

from .callgraph import (
    CallGraph,
    ContextualizedChunk,
    assemble_context,
    build_call_graph,
    build_contexts,
    load_contexts,
    load_graph,
    neighbors,
    save_contexts,
    save_graph,
)
from .chunking import (
    Chunk,
    ChunkerConfig,
    ChunkSet,
    chunk_file,
    chunk_repository,
    load_chunks,
    render_chunk,
    save_chunks,
)
from .dataset import (
    DatasetStats,
    EditSpan,
    IngestReport,
    RawInstance,
    dataset_stats,
    ingest_instances,
    load_prepared,
    load_raw_instances,
    map_to_gt_chunks,
    parse_patch,
    save_prepared,
)
from .embedding import (
    DOWN_TOKEN,
    TOKEN_ENV_VAR,
    ProviderEmbedder,
    ProviderError,
    ToyEmbedder,
    ToyEmbedderParams,
    cosine,
    init_toy_params,
    load_params,
    params_fingerprint,
    save_params,
    tokenize,
    toy_embed,
)
from .lexical import Bm25Retriever, Bm25Stats, bm25_build, bm25_rank, mine_hard_negatives
from .metrics import EvalResult, evaluate, file_level, mrr, perfect_recall_at_k, recall_at_k
from .retrieval import (
    DenseRetriever,
    Index,
    RankedRetrieval,
    build_index,
    load_index,
    save_index,
    top_k,
)
from .training import (
    LossReport,
    TrainingConfig,
    TrainingInstance,
    full_normalizer_loss,
    instance_loss,
    load_training_config,
    sample_negatives,
    save_training_config,
    split_dataset,
    train_toy,
)

__all__ = [
    "__version__",
    # chunking
    "Chunk", "ChunkerConfig", "ChunkSet", "chunk_file", "chunk_repository",
    "load_chunks", "render_chunk", "save_chunks",
    # call graph / context
    "CallGraph", "ContextualizedChunk", "assemble_context", "build_call_graph",
    "build_contexts", "load_contexts", "load_graph", "neighbors",
    "save_contexts", "save_graph",
    # embedding
    "DOWN_TOKEN", "TOKEN_ENV_VAR", "ProviderEmbedder", "ProviderError",
    "ToyEmbedder", "ToyEmbedderParams", "cosine", "init_toy_params",
    "load_params", "params_fingerprint", "save_params", "tokenize", "toy_embed",
    # retrieval
    "DenseRetriever", "Index", "RankedRetrieval", "build_index", "load_index",
    "save_index", "top_k",
    # lexical
    "Bm25Retriever", "Bm25Stats", "bm25_build", "bm25_rank", "mine_hard_negatives",
    # metrics
    "EvalResult", "evaluate", "file_level", "mrr", "perfect_recall_at_k", "recall_at_k",
    # training
    "LossReport", "TrainingConfig", "TrainingInstance", "full_normalizer_loss",
    "instance_loss", "load_training_config", "sample_negatives",
    "save_training_config", "split_dataset", "train_toy",
    # dataset
    "DatasetStats", "EditSpan", "IngestReport", "RawInstance", "dataset_stats",
    "ingest_instances", "load_prepared", "load_raw_instances", "map_to_gt_chunks",
    "parse_patch", "save_prepared",
]
