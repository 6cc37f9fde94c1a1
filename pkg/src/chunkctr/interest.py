"""Pooling chunks into interest vectors and target-driven aggregation."""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .attention import ChunkLayout
from .errors import InvariantError, ShapeError


@dataclass
class InterestSet:
    """One pooled vector per non-empty chunk."""

    vectors: Tensor  # (num_interests, d)
    counts: list[int]  # non-pad rows behind each vector


def chunk_validity(layout: ChunkLayout) -> list[int]:
    """Non-pad row count per chunk; padding always sits at the tail."""
    return [
        max(0, min(layout.chunk_size, layout.length - j * layout.chunk_size))
        for j in range(layout.num_chunks)
    ]


def pool_chunks(x: Tensor, layout: ChunkLayout, validity: list[int] | None = None) -> InterestSet:
    """Mean-pool the leading non-pad rows of every chunk.

    All-pad chunks are dropped rather than pooled to zero; they are an
    artifact of chunking, not data.
    """
    if x.rows != layout.padded_length:
        raise ShapeError(f"sequence has {x.rows} rows, layout expects {layout.padded_length}")
    if validity is None:
        validity = chunk_validity(layout)
    if len(validity) != layout.num_chunks:
        raise ShapeError(f"validity has {len(validity)} entries for {layout.num_chunks} chunks")
    pooled = []
    counts = []
    for j, count in enumerate(validity):
        if count == 0:
            continue
        lo = j * layout.chunk_size
        pooled.append(ad.mean_rows(ad.slice_rows(x, lo, lo + count)))
        counts.append(count)
    if not pooled:
        raise InvariantError("pool_chunks: every chunk is padding; nothing to pool")
    vectors = pooled[0] if len(pooled) == 1 else ad.concat_rows(*pooled)
    return InterestSet(vectors=vectors, counts=counts)


@dataclass
class TargetAttentionParams:
    """Target transform plus the scoring MLP over (interest, target) pairs."""

    target_w: Tensor  # (target_dim, d)
    target_b: Tensor
    score_w1: Tensor  # (2d, hidden)
    score_b1: Tensor
    score_w2: Tensor  # (hidden, 1)
    score_b2: Tensor

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("target_w", self.target_w),
            ("target_b", self.target_b),
            ("score_w1", self.score_w1),
            ("score_b1", self.score_b1),
            ("score_w2", self.score_w2),
            ("score_b2", self.score_b2),
        ]


def attention_scores(interests: InterestSet, target: Tensor, params: TargetAttentionParams) -> Tensor:
    """One raw relevance score per interest vector.

    The scores stay unnormalized on purpose; the aggregation below uses
    them as-is instead of softmaxing them first.
    """
    if target.rows != 1:
        raise ShapeError(f"target must be a single row, got {target.shape}")
    projected = ad.linear(target, params.target_w, params.target_b)  # 1 x d
    tiled = ad.repeat_rows(projected, interests.vectors.rows)
    paired = ad.concat_cols(interests.vectors, tiled)
    hidden = ad.relu(ad.linear(paired, params.score_w1, params.score_b1))
    return ad.linear(hidden, params.score_w2, params.score_b2)


def aggregate(interests: InterestSet, scores: Tensor) -> Tensor:
    """Weighted sum of interest vectors with raw scores: a 1 x d row."""
    if scores.shape != (interests.vectors.rows, 1):
        raise ShapeError(
            f"scores {scores.shape} do not match {interests.vectors.rows} interest vectors"
        )
    return ad.matmul(ad.transpose(scores), interests.vectors)
