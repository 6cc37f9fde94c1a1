"""Sign-of-random-projection hashing, bucket ids, and stable sorting.

Rows are hashed by the signs of their projections onto fixed Gaussian
directions. Two vectors at angle theta agree on any single sign bit with
probability 1 - theta/pi, so rows sharing a full code (a bucket) are
similar with high probability. A stable sort groups buckets together
while preserving the original (temporal) order inside each bucket.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import f32_grid
from .errors import ConfigError, ShapeError

# Bucket ids are signed 64-bit integers; one bit is reserved for the sign
# and one for the padding sentinel headroom.
MAX_HASH_BITS = 62


@dataclass(frozen=True)
class ProjectionMatrix:
    """Fixed Gaussian projection directions, sampled once per model.

    The matrix is drawn from the recorded seed at construction and never
    re-sampled; it travels inside checkpoints so hashing is identical
    between training and inference.
    """

    matrix: np.ndarray  # (input_dim, bits)
    seed: int

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2:
            raise ShapeError(f"projection matrix must be 2-D, got shape {self.matrix.shape}")
        self.matrix.setflags(write=False)

    @property
    def input_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def bits(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def sample(cls, input_dim: int, bits: int, seed: int) -> "ProjectionMatrix":
        if input_dim < 1 or bits < 1:
            raise ConfigError(f"projection needs input_dim >= 1 and bits >= 1, got {input_dim}, {bits}")
        rng = np.random.default_rng(seed)
        matrix = f32_grid(rng.standard_normal((input_dim, bits)))
        return cls(matrix=matrix, seed=seed)


@dataclass(frozen=True)
class HashAssignment:
    """Bucket assignment for one behavior sequence.

    perm sorts rows by bucket id (output row k is input row perm[k]);
    inverse_perm undoes it exactly.
    """

    bucket_ids: np.ndarray  # (L,) int64, in original row order
    perm: np.ndarray  # (L,) int64
    inverse_perm: np.ndarray  # (L,) int64
    codes: np.ndarray | None = None  # (L, bits) uint8 when built via assign_buckets


def hash_codes(xb: np.ndarray, projection: ProjectionMatrix) -> np.ndarray:
    """Per-row hash codes: bit j is 1 iff the j-th projection is > 0.

    An exactly-zero projection hashes to 0, keeping codes deterministic.
    """
    xb = np.asarray(xb, dtype=np.float64)
    if xb.ndim != 2 or xb.shape[1] != projection.input_dim:
        raise ShapeError(
            f"embeddings have shape {xb.shape}, projection expects {projection.input_dim} columns"
        )
    return (xb @ projection.matrix > 0.0).astype(np.uint8)


def bucket_ids(codes: np.ndarray) -> np.ndarray:
    """Read each m-bit code row as a big-endian unsigned integer."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ShapeError(f"codes must be 2-D, got shape {codes.shape}")
    bits = codes.shape[1]
    if bits > MAX_HASH_BITS:
        raise ConfigError(f"{bits} hash bits exceed the {MAX_HASH_BITS}-bit id limit")
    weights = 2 ** np.arange(bits - 1, -1, -1, dtype=np.int64)
    return codes.astype(np.int64) @ weights


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size, dtype=np.int64)
    return inverse


def stable_sort(
    xb: np.ndarray, ids: np.ndarray, codes: np.ndarray | None = None
) -> tuple[HashAssignment, np.ndarray]:
    """Stable-sort rows by bucket id; equal ids keep their input order.

    Returns the assignment record and the reordered copy of xb.
    """
    xb = np.asarray(xb, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size != xb.shape[0]:
        raise ShapeError(f"ids of shape {ids.shape} do not match {xb.shape[0]} rows")
    perm = np.argsort(ids, kind="stable")
    assignment = HashAssignment(
        bucket_ids=ids,
        perm=perm,
        inverse_perm=invert_permutation(perm),
        codes=codes,
    )
    return assignment, xb[perm]


def assign_buckets(xb: np.ndarray, projection: ProjectionMatrix) -> tuple[HashAssignment, np.ndarray]:
    """hash_codes -> bucket_ids -> stable_sort in one call."""
    codes = hash_codes(xb, projection)
    ids = bucket_ids(codes)
    return stable_sort(xb, ids, codes=codes)
