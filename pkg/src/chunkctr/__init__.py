"""Long-sequence CTR prediction with hash-bucketed chunk attention."""

__version__ = "0.1.0"

from .autodiff import Tensor, grad_check
from .lsh import HashAssignment, ProjectionMatrix, assign_buckets, bucket_ids, hash_codes, stable_sort
from .attention import (
    BlockParams,
    ChunkLayout,
    block_pair,
    bucket_mask,
    chunk_self_attention,
    cyclic_shift,
    partition,
    reverse_shift,
)
from .interest import InterestSet, TargetAttentionParams, aggregate, attention_scores, pool_chunks
from .model import (
    ModelParams,
    Sample,
    TrainConfig,
    Trainer,
    auc,
    bce_loss,
    evaluate,
    forward,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from .data import EmbeddingCache, SyntheticSpec, as_samples, generate, read_cache, write_cache
from .bench import SchemaReport, closed_form_macs, run_sweep

__all__ = [
    "Tensor",
    "grad_check",
    "HashAssignment",
    "ProjectionMatrix",
    "assign_buckets",
    "bucket_ids",
    "hash_codes",
    "stable_sort",
    "BlockParams",
    "ChunkLayout",
    "block_pair",
    "bucket_mask",
    "chunk_self_attention",
    "cyclic_shift",
    "partition",
    "reverse_shift",
    "InterestSet",
    "TargetAttentionParams",
    "aggregate",
    "attention_scores",
    "pool_chunks",
    "ModelParams",
    "Sample",
    "TrainConfig",
    "Trainer",
    "auc",
    "bce_loss",
    "evaluate",
    "forward",
    "init_params",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "train",
    "EmbeddingCache",
    "SyntheticSpec",
    "as_samples",
    "generate",
    "read_cache",
    "write_cache",
    "SchemaReport",
    "closed_form_macs",
    "run_sweep",
]
