"""Chunked self-attention with same-bucket masking and cyclic shifts.

The sorted sequence is cut into fixed-size chunks and attention runs
inside each chunk, confined by a mask to pairs from the same bucket.
Alternate blocks rotate the whole sequence by half a chunk before
attending and rotate back afterwards, so a bucket that straddles a chunk
boundary still gets its rows talking to each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_NEG_INF, Tensor
from .errors import ConfigError, ShapeError

# Reserved id for padding rows; bucket_ids() never produces it because
# hash codes read as unsigned integers.
PAD_BUCKET_ID = -1


@dataclass(frozen=True)
class ChunkLayout:
    """Geometry of the padded, chunked sequence."""

    length: int  # real rows before padding
    chunk_size: int
    padded_length: int
    num_chunks: int
    pad_count: int

    @property
    def shift(self) -> int:
        """Offset used by the shifted attention stage: half a chunk."""
        return self.chunk_size // 2


def partition(length: int, chunk_size: int) -> ChunkLayout:
    """Lay out `length` rows into the smallest whole number of chunks."""
    if chunk_size < 2 or chunk_size % 2 != 0:
        raise ConfigError(f"chunk size must be even and >= 2, got {chunk_size}")
    if length < 1:
        raise ConfigError(f"sequence length must be >= 1, got {length}")
    num_chunks = -(-length // chunk_size)
    padded = num_chunks * chunk_size
    return ChunkLayout(
        length=length,
        chunk_size=chunk_size,
        padded_length=padded,
        num_chunks=num_chunks,
        pad_count=padded - length,
    )


def pad_bucket_ids(ids: np.ndarray, layout: ChunkLayout) -> np.ndarray:
    """Append the reserved pad id so ids cover the padded length."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size != layout.length:
        raise ShapeError(f"expected {layout.length} ids, got {ids.size}")
    return np.concatenate([ids, np.full(layout.pad_count, PAD_BUCKET_ID, dtype=np.int64)])


def bucket_mask(ids: np.ndarray) -> np.ndarray:
    """Additive attention mask: 0 where query and key share a bucket.

    Padding rows see only themselves, and the diagonal is always open so
    no row can end up fully masked.
    """
    ids = np.asarray(ids, dtype=np.int64)
    same = ids[:, None] == ids[None, :]
    real = ids != PAD_BUCKET_ID
    visible = same & real[:, None] & real[None, :]
    np.fill_diagonal(visible, True)
    return np.where(visible, 0.0, MASK_NEG_INF)


def full_mask(ids: np.ndarray) -> np.ndarray:
    """Mask for the global-attention ablation: every real row sees every
    other real row; padding rows still see only themselves."""
    ids = np.asarray(ids, dtype=np.int64)
    real = ids != PAD_BUCKET_ID
    visible = real[:, None] & real[None, :]
    np.fill_diagonal(visible, True)
    return np.where(visible, 0.0, MASK_NEG_INF)


@dataclass
class BlockParams:
    """Learnable tensors of one transformer block.

    Attention projections are (d, d); the MLP expands to 4d and back.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("w_q", self.w_q),
            ("w_k", self.w_k),
            ("w_v", self.w_v),
            ("w_o", self.w_o),
            ("ln1_gain", self.ln1_gain),
            ("ln1_bias", self.ln1_bias),
            ("ln2_gain", self.ln2_gain),
            ("ln2_bias", self.ln2_bias),
            ("mlp_w1", self.mlp_w1),
            ("mlp_b1", self.mlp_b1),
            ("mlp_w2", self.mlp_w2),
            ("mlp_b2", self.mlp_b2),
        ]


@dataclass(frozen=True)
class AttentionRecord:
    """Realized attention probabilities of one chunk, for inspection.

    rows maps chunk positions back to positions in the unshifted padded
    sequence, so records from shifted stages can be compared in place.
    """

    rows: np.ndarray
    head: int
    probs: np.ndarray


def chunk_self_attention(
    x_chunk: Tensor,
    params: BlockParams,
    mask: np.ndarray,
    n_heads: int = 1,
    attn_sink: list[AttentionRecord] | None = None,
    rows: np.ndarray | None = None,
) -> Tensor:
    """Masked single-chunk attention followed by the output projection.

    With several heads the model dimension splits into equal column
    slices; the same mask applies to every head, and the scale factor
    uses the per-head width.
    """
    d = x_chunk.cols
    if n_heads < 1 or d % n_heads != 0:
        raise ConfigError(f"dimension {d} is not divisible into {n_heads} heads")
    q = ad.matmul(x_chunk, params.w_q)
    k = ad.matmul(x_chunk, params.w_k)
    v = ad.matmul(x_chunk, params.w_v)
    head_dim = d // n_heads
    inv_scale = 1.0 / math.sqrt(head_dim)
    outputs = []
    for h in range(n_heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        if n_heads == 1:
            qh, kh, vh = q, k, v
        else:
            qh = ad.slice_cols(q, lo, hi)
            kh = ad.slice_cols(k, lo, hi)
            vh = ad.slice_cols(v, lo, hi)
        probs = ad.masked_softmax_rows(ad.matmul_nt(qh, kh, inv_scale), mask)
        if attn_sink is not None:
            chunk_rows = np.arange(x_chunk.rows) if rows is None else np.asarray(rows)
            attn_sink.append(AttentionRecord(rows=chunk_rows.copy(), head=h, probs=probs.value.copy()))
        outputs.append(ad.matmul(probs, vh))
    merged = outputs[0] if len(outputs) == 1 else ad.concat_cols(*outputs)
    return ad.matmul(merged, params.w_o)


def cyclic_shift(x: Tensor, ids: np.ndarray, offset: int) -> tuple[Tensor, np.ndarray]:
    """Rotate rows so output row k is input row (k + offset) mod length.

    ids rotate identically. A full-cycle offset is the identity.
    """
    if offset < 0:
        raise ConfigError(f"shift offset must be >= 0, got {offset}")
    n = x.rows
    perm = (np.arange(n, dtype=np.int64) + offset) % n
    return ad.gather_rows(x, perm), np.asarray(ids, dtype=np.int64)[perm]


def reverse_shift(x: Tensor, ids: np.ndarray, offset: int) -> tuple[Tensor, np.ndarray]:
    """Undo cyclic_shift with the same offset, bit-exactly."""
    n = x.rows
    return cyclic_shift(x, ids, (n - offset % n) % n)


def chunk_masks(ids: np.ndarray, layout: ChunkLayout) -> list[np.ndarray]:
    """One bucket mask per chunk of the padded id sequence."""
    ids = np.asarray(ids, dtype=np.int64)
    c = layout.chunk_size
    return [bucket_mask(ids[j * c : (j + 1) * c]) for j in range(layout.num_chunks)]


def chunked_attention(
    x: Tensor,
    ids: np.ndarray,
    layout: ChunkLayout,
    params: BlockParams,
    n_heads: int = 1,
    attn_sink: list[AttentionRecord] | None = None,
    row_map: np.ndarray | None = None,
    masks: list[np.ndarray] | None = None,
) -> Tensor:
    """Per-chunk masked attention over the whole padded sequence.

    Masks are built from the ids as given, so callers running a shifted
    stage pass the shifted ids and get freshly recomputed masks; `masks`
    short-circuits the rebuild when the caller already holds them (they
    depend only on the ids, not on the layer).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if x.rows != layout.padded_length or ids.size != layout.padded_length:
        raise ShapeError(
            f"padded sequence of {x.rows} rows / {ids.size} ids does not match layout {layout}"
        )
    if masks is None:
        masks = chunk_masks(ids, layout)
    c = layout.chunk_size
    outputs = []
    for j in range(layout.num_chunks):
        lo, hi = j * c, (j + 1) * c
        rows = None if row_map is None else row_map[lo:hi]
        outputs.append(
            chunk_self_attention(
                ad.slice_rows(x, lo, hi),
                params,
                masks[j],
                n_heads=n_heads,
                attn_sink=attn_sink,
                rows=rows,
            )
        )
    return outputs[0] if len(outputs) == 1 else ad.concat_rows(*outputs)


def _mlp(x: Tensor, params: BlockParams) -> Tensor:
    hidden = ad.relu(ad.linear(x, params.mlp_w1, params.mlp_b1))
    return ad.linear(hidden, params.mlp_w2, params.mlp_b2)


def block(
    x: Tensor,
    ids: np.ndarray,
    layout: ChunkLayout,
    params: BlockParams,
    *,
    shifted: bool,
    n_heads: int = 1,
    global_attn: bool = False,
    attn_sink: list[AttentionRecord] | None = None,
    masks: list[np.ndarray] | None = None,
) -> Tensor:
    """One pre-norm transformer block: attention and MLP, each residual.

    shifted=True runs the attention on the half-chunk-rotated sequence
    (masks recomputed on the rotated ids) and rotates the result back
    before the residual add. global_attn=True replaces chunked attention
    with one full-sequence attention, used by the ablation baseline.
    `masks` optionally carries the precomputed masks for this block's
    arrangement (shifted masks for a shifted block).
    """
    normed = ad.layer_norm(x, params.ln1_gain, params.ln1_bias)
    if global_attn:
        attended = chunk_self_attention(
            normed,
            params,
            full_mask(ids) if masks is None else masks[0],
            n_heads=n_heads,
            attn_sink=attn_sink,
            rows=np.arange(x.rows),
        )
    elif shifted:
        offset = layout.shift
        row_map = (np.arange(layout.padded_length, dtype=np.int64) + offset) % layout.padded_length
        shifted_x, shifted_ids = cyclic_shift(normed, ids, offset)
        attended = chunked_attention(
            shifted_x, shifted_ids, layout, params,
            n_heads=n_heads, attn_sink=attn_sink, row_map=row_map, masks=masks,
        )
        attended, _ = reverse_shift(attended, shifted_ids, offset)
    else:
        attended = chunked_attention(
            normed, ids, layout, params,
            n_heads=n_heads, attn_sink=attn_sink,
            row_map=np.arange(layout.padded_length, dtype=np.int64), masks=masks,
        )
    x = ad.add(attended, x)
    normed2 = ad.layer_norm(x, params.ln2_gain, params.ln2_bias)
    return ad.add(_mlp(normed2, params), x)


def block_pair(
    x: Tensor,
    ids: np.ndarray,
    layout: ChunkLayout,
    params_plain: BlockParams,
    params_shifted: BlockParams,
    n_heads: int = 1,
    attn_sink_plain: list[AttentionRecord] | None = None,
    attn_sink_shifted: list[AttentionRecord] | None = None,
    masks_plain: list[np.ndarray] | None = None,
    masks_shifted: list[np.ndarray] | None = None,
) -> Tensor:
    """Two successive blocks: plain chunk attention, then the shifted variant."""
    x = block(
        x, ids, layout, params_plain,
        shifted=False, n_heads=n_heads, attn_sink=attn_sink_plain, masks=masks_plain,
    )
    return block(
        x, ids, layout, params_shifted,
        shifted=True, n_heads=n_heads, attn_sink=attn_sink_shifted, masks=masks_shifted,
    )
