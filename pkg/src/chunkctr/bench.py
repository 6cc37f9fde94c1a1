"""Instrumented attention kernels and wall-clock complexity sweeps.

The kernels are forward-only. Sweeps run with the BLAS thread pool
pinned to one thread so timings are comparable across schemas and
lengths. Multiply-accumulate counts cover the attention stage (the
score and value contractions) and are exact counters, not estimates.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import PAD_BUCKET_ID, bucket_mask
from .errors import ConfigError
from .lsh import ProjectionMatrix, bucket_ids, hash_codes

SCHEMAS = ("g-sa", "b-sa", "c-sa", "sc-sa")


@dataclass(frozen=True)
class SchemaReport:
    """One measured configuration of one attention schema.

    raw_ms holds the individual trial times behind median_ms; trials are
    interleaved across configurations, so raw_ms[i] of two reports from
    one sweep were measured back to back.
    """

    schema: str
    length: int
    chunk_size: int
    dim: int
    macs: int
    sort_comparisons: int
    median_ms: float
    raw_ms: tuple[float, ...] = ()


def closed_form_macs(schema: str, length: int, chunk_size: int, dim: int) -> int | None:
    """Expected attention MACs; None for b-sa (depends on bucket sizes)."""
    if schema == "g-sa":
        return 2 * length * length * dim
    if schema in ("c-sa", "sc-sa"):
        return 2 * length * chunk_size * dim
    return None


def merge_sort_perm(keys: Sequence) -> tuple[np.ndarray, int]:
    """Stable bottom-up merge sort returning (permutation, comparisons).

    Only key-to-key comparisons are counted; the count grows as
    Theta(n log n).
    """
    keys = list(keys)
    n = len(keys)
    src = list(range(n))
    dst = [0] * n
    comparisons = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                comparisons += 1
                if keys[src[j]] < keys[src[i]]:
                    dst[k] = src[j]
                    j += 1
                else:
                    dst[k] = src[i]
                    i += 1
                k += 1
            while i < mid:
                dst[k] = src[i]
                i += 1
                k += 1
            while j < hi:
                dst[k] = src[j]
                j += 1
                k += 1
        src, dst = dst, src
        width *= 2
    return np.array(src, dtype=np.int64), comparisons


def _softmax_rows(scores: np.ndarray, visible: np.ndarray | None = None) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    if visible is not None:
        weights = weights * visible
    return weights / weights.sum(axis=1, keepdims=True)


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray | None) -> tuple[np.ndarray, int]:
    """Masked scaled-dot attention over one span; returns (output, macs)."""
    n, d = q.shape
    scores = (q @ k.T) / math.sqrt(d)
    visible = None
    if mask is not None:
        scores = scores + mask
        visible = mask > -1e15
    probs = _softmax_rows(scores, visible)
    return probs @ v, 2 * n * n * d


@dataclass(frozen=True)
class KernelResult:
    output: np.ndarray
    macs: int
    attn_seconds: float


_ROW_BLOCK = 64


def gsa_forward(x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray) -> KernelResult:
    """Full-sequence attention: the quadratic baseline, no mask, no sort.

    Scores are computed in row blocks so the working set (k, v, one score
    block) stays cache-resident at every swept length; the timing then
    reflects the O(L^2) arithmetic instead of allocation and cache-spill
    artifacts of an L x L intermediate.
    """
    q = x @ wq
    k = x @ wk
    v = x @ wv
    length, d = x.shape
    scale = 1.0 / math.sqrt(d)
    out = np.empty_like(x)
    out.fill(0.0)  # fault the pages in before the timer starts
    macs = 0
    t0 = time.perf_counter()
    for lo in range(0, length, _ROW_BLOCK):
        hi = min(lo + _ROW_BLOCK, length)
        scores = (q[lo:hi] @ k.T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[lo:hi] = scores @ v
        macs += 2 * (hi - lo) * length * d
    elapsed = time.perf_counter() - t0
    return KernelResult(out, macs, elapsed)


def bsa_forward(x: np.ndarray, ids: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray) -> KernelResult:
    """Per-bucket full attention; ids must be sorted non-decreasingly."""
    ids = np.asarray(ids)
    if ids.size > 1 and (np.diff(ids) < 0).any():
        raise ConfigError("b-sa expects bucket-sorted input")
    q = x @ wq
    k = x @ wk
    v = x @ wv
    boundaries = np.flatnonzero(np.diff(ids)) + 1
    starts = np.concatenate([[0], boundaries])
    stops = np.concatenate([boundaries, [ids.size]])
    out = np.empty_like(x)
    macs = 0
    t0 = time.perf_counter()
    for lo, hi in zip(starts, stops):
        out[lo:hi], span_macs = _attend(q[lo:hi], k[lo:hi], v[lo:hi], None)
        macs += span_macs
    elapsed = time.perf_counter() - t0
    return KernelResult(out, macs, elapsed)


def csa_forward(
    x: np.ndarray,
    ids: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    chunk_size: int,
    shifted: bool = False,
) -> KernelResult:
    """Chunked attention with same-bucket masks; ids must be sorted.

    shifted=True is the rotate / attend / rotate-back variant; the
    rotation is inside the timed attention stage since it is part of the
    schema.
    """
    if chunk_size < 1:
        raise ConfigError(f"chunk size must be >= 1, got {chunk_size}")
    length = x.shape[0]
    pad = (-length) % chunk_size
    if pad:
        x = np.concatenate([x, np.zeros((pad, x.shape[1]))], axis=0)
        ids = np.concatenate([ids, np.full(pad, PAD_BUCKET_ID, dtype=np.int64)])
    padded = length + pad
    q = x @ wq
    k = x @ wk
    v = x @ wv
    offset = (chunk_size // 2) if shifted else 0
    macs = 0
    out = np.empty_like(x)
    out.fill(0.0)  # fault the pages in before the timer starts
    t0 = time.perf_counter()
    if offset:
        q, k, v = (np.roll(a, -offset, axis=0) for a in (q, k, v))
        span_ids = np.roll(ids, -offset)
    else:
        span_ids = ids
    for lo in range(0, padded, chunk_size):
        hi = lo + chunk_size
        mask = bucket_mask(span_ids[lo:hi])
        out[lo:hi], span_macs = _attend(q[lo:hi], k[lo:hi], v[lo:hi], mask)
        macs += span_macs
    if offset:
        out = np.roll(out, offset, axis=0)
    elapsed = time.perf_counter() - t0
    return KernelResult(out[:length], macs, elapsed)


def _run_schema(
    schema: str,
    x_sorted: np.ndarray,
    ids_sorted: np.ndarray,
    weights: tuple[np.ndarray, np.ndarray, np.ndarray],
    chunk_size: int,
) -> KernelResult:
    wq, wk, wv = weights
    if schema == "g-sa":
        return gsa_forward(x_sorted, wq, wk, wv)
    if schema == "b-sa":
        return bsa_forward(x_sorted, ids_sorted, wq, wk, wv)
    if schema == "c-sa":
        return csa_forward(x_sorted, ids_sorted, wq, wk, wv, chunk_size, shifted=False)
    if schema == "sc-sa":
        return csa_forward(x_sorted, ids_sorted, wq, wk, wv, chunk_size, shifted=True)
    raise ConfigError(f"unknown schema {schema!r}; valid: {', '.join(SCHEMAS)}")


def run_sweep(
    schemas: Sequence[str],
    lengths: Sequence[int],
    chunk_size: int,
    trials: int,
    dim: int = 64,
    hash_bits: int = 4,
    seed: int = 0,
) -> list[SchemaReport]:
    """Time every schema on identical inputs at each length.

    Each configuration gets one untimed warm-up pass, then `trials` timed
    passes whose median is reported. The BLAS pool is pinned to a single
    thread for the whole sweep so timings are comparable. Sorting cost is
    reported as merge sort comparisons (zero for g-sa, which does not
    sort).
    """
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ConfigError("lengths must be ascending")
    if trials < 3:
        raise ConfigError(f"need at least 3 trials, got {trials}")
    unknown = [s for s in schemas if s not in SCHEMAS]
    if unknown:
        raise ConfigError(f"unknown schemas {unknown}; valid: {', '.join(SCHEMAS)}")
    with threadpool_limits(limits=1):
        return _sweep_single_threaded(schemas, lengths, chunk_size, trials, dim, hash_bits, seed)


def _sweep_single_threaded(schemas, lengths, chunk_size, trials, dim, hash_bits, seed):
    rng = np.random.default_rng(seed)
    inputs = {}
    for length in lengths:
        x = rng.standard_normal((length, dim))
        weights = tuple(rng.standard_normal((dim, dim)) for _ in range(3))
        projection = ProjectionMatrix.sample(dim, hash_bits, seed=seed + length)
        ids = bucket_ids(hash_codes(x, projection))
        perm, comparisons = merge_sort_perm(ids)
        inputs[length] = (x[perm], ids[perm], weights, comparisons)

    # trials are interleaved across configurations so slow machine-load
    # drift lands on every configuration alike instead of biasing ratios
    times: dict[tuple[str, int], list[float]] = {(s, L): [] for s in schemas for L in lengths}
    macs: dict[tuple[str, int], int] = {}
    for trial in range(trials + 1):
        for length in lengths:
            x_sorted, ids_sorted, weights, _ = inputs[length]
            for schema in schemas:
                result = _run_schema(schema, x_sorted, ids_sorted, weights, chunk_size)
                macs[(schema, length)] = result.macs
                if trial > 0:  # first pass is the warm-up
                    times[(schema, length)].append(result.attn_seconds)

    reports = []
    for length in lengths:
        comparisons = inputs[length][3]
        for schema in schemas:
            reports.append(
                SchemaReport(
                    schema=schema,
                    length=length,
                    chunk_size=chunk_size,
                    dim=dim,
                    macs=macs[(schema, length)],
                    sort_comparisons=0 if schema == "g-sa" else comparisons,
                    median_ms=statistics.median(times[(schema, length)]) * 1000.0,
                    raw_ms=tuple(t * 1000.0 for t in times[(schema, length)]),
                )
            )
    return reports


CSV_HEADER = "schema,L,c,d,macs,sort_comparisons,median_ms"


def format_csv(reports: Sequence[SchemaReport]) -> str:
    lines = [CSV_HEADER]
    for r in reports:
        lines.append(
            f"{r.schema},{r.length},{r.chunk_size},{r.dim},{r.macs},{r.sort_comparisons},{r.median_ms:.6f}"
        )
    return "\n".join(lines) + "\n"


def write_csv(reports: Sequence[SchemaReport], path) -> None:
    with open(path, "w") as fh:
        fh.write(format_csv(reports))
