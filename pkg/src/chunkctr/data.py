"""Synthetic clustered behavior data and the precomputed embedding cache.

Items live in well-separated clusters on the unit sphere. Each user gets
a few clusters as interests, behaviors are drawn from those clusters,
and the label records whether the target item's cluster is one of the
user's interests, flipped with a configurable noise rate. Item vectors
are precomputed once and served from a binary cache, standing in for a
frozen text encoder whose outputs are computed ahead of time.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import f32_grid
from .errors import CacheError, ConfigError
from .model import Sample

CACHE_MAGIC = b"TBEC"
CACHE_VERSION = 1

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings; one sample is produced per user."""

    clusters: int = 8
    behavior_dim: int = 32
    items_per_cluster: int = 50
    users: int = 4000
    seq_len: int = 128
    interests_per_user: int = 3
    noise_rate: float = 0.05
    user_dim: int = 8
    seed: int = 0
    min_center_angle_deg: float = 30.0

    def __post_init__(self) -> None:
        if self.clusters < 2:
            raise ConfigError(f"need at least 2 clusters, got {self.clusters}")
        if not 0.0 <= self.noise_rate < 0.5:
            raise ConfigError(f"noise_rate must lie in [0, 0.5), got {self.noise_rate}")
        if self.interests_per_user < 1 or self.interests_per_user > self.clusters:
            raise ConfigError(
                f"interests_per_user must lie in [1, {self.clusters}], got {self.interests_per_user}"
            )
        for name in ("behavior_dim", "items_per_cluster", "users", "seq_len", "user_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class SampleRecord:
    """One sample as stored on disk; item embeddings are referenced by id.

    target_cluster and user_clusters carry the generator's ground truth,
    so oracle classifiers can be built on top of the noisy label.
    """

    user_vec: list[float]
    behavior_ids: list[int]
    target_id: int
    label: int
    target_cluster: int
    user_clusters: list[int]


class EmbeddingCache:
    """Precomputed item embeddings with an exact binary round-trip.

    File layout: magic "TBEC", u32 version, u32 count, u32 dim, then
    count little-endian i64 item ids, then count rows of dim little-endian
    f32 values in id-index order.
    """

    def __init__(self, ids: np.ndarray, vectors: np.ndarray):
        ids = np.asarray(ids, dtype=np.int64)
        vectors = f32_grid(vectors)
        if ids.ndim != 1 or vectors.ndim != 2 or ids.size != vectors.shape[0]:
            raise CacheError(
                f"cache needs matching ids ({ids.shape}) and vectors ({vectors.shape})"
            )
        if len(set(ids.tolist())) != ids.size:
            raise CacheError("cache ids must be unique")
        self.ids = ids
        self.vectors = vectors
        self._index = {int(i): k for k, i in enumerate(ids)}

    def __len__(self) -> int:
        return self.ids.size

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, ids: Iterable[int]) -> np.ndarray:
        """Rows for the given ids, in order; unknown ids raise CacheError."""
        wanted = [int(i) for i in ids]
        missing = [i for i in wanted if i not in self._index]
        if missing:
            raise CacheError(f"cache is missing embedding ids {missing[:10]}")
        return self.vectors[[self._index[i] for i in wanted]]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(CACHE_MAGIC)
            fh.write(struct.pack("<III", CACHE_VERSION, len(self), self.dim))
            fh.write(self.ids.astype("<i8").tobytes())
            fh.write(self.vectors.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingCache":
        data = Path(path).read_bytes()
        if len(data) < 16 or data[:4] != CACHE_MAGIC:
            raise CacheError(f"{path}: not an embedding cache (bad magic)")
        version, count, dim = struct.unpack_from("<III", data, 4)
        if version != CACHE_VERSION:
            raise CacheError(f"{path}: unsupported cache version {version}")
        expected = 16 + count * 8 + count * dim * 4
        if len(data) != expected:
            raise CacheError(f"{path}: expected {expected} bytes, found {len(data)}")
        ids = np.frombuffer(data, dtype="<i8", count=count, offset=16).astype(np.int64)
        vectors = np.frombuffer(data, dtype="<f4", count=count * dim, offset=16 + count * 8)
        return cls(ids=ids, vectors=vectors.astype(np.float64).reshape(count, dim))


def write_cache(path, mapping: Mapping[int, np.ndarray]) -> None:
    """Persist an id -> vector mapping, sorted by id for determinism."""
    ids = sorted(int(i) for i in mapping)
    if not ids:
        raise CacheError("refusing to write an empty cache")
    vectors = np.stack([np.asarray(mapping[i], dtype=np.float64) for i in ids])
    EmbeddingCache(np.array(ids, dtype=np.int64), vectors).save(path)


def read_cache(path, ids: Iterable[int]) -> np.ndarray:
    return EmbeddingCache.load(path).lookup(ids)


@dataclass
class SyntheticDataset:
    """Generated splits plus the item cache they reference.

    Item ids are laid out cluster-major: item i belongs to cluster
    i // items_per_cluster.
    """

    spec: SyntheticSpec
    cache: EmbeddingCache
    splits: dict[str, list[SampleRecord]]


def _separated_centers(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    """Unit-norm cluster centers with all pairwise angles >= the minimum."""
    max_cos = math.cos(math.radians(spec.min_center_angle_deg))
    centers: list[np.ndarray] = []
    attempts = 0
    while len(centers) < spec.clusters:
        attempts += 1
        if attempts > 1000 * spec.clusters:
            raise ConfigError(
                f"could not place {spec.clusters} centers at >= "
                f"{spec.min_center_angle_deg} degrees in {spec.behavior_dim} dimensions"
            )
        v = rng.standard_normal(spec.behavior_dim)
        v /= np.linalg.norm(v)
        if all(float(np.dot(v, c)) <= max_cos for c in centers):
            centers.append(v)
    return np.stack(centers)


def generate(spec: SyntheticSpec) -> SyntheticDataset:
    """Deterministic per seed; returns 80/10/10 train/val/test splits.

    Item noise is isotropic with total norm of about 0.1 of the unit
    center norm, which keeps same-cluster items within a few degrees of
    each other so hash buckets track clusters.
    """
    rng = np.random.default_rng(spec.seed)
    centers = _separated_centers(rng, spec)
    sigma = 0.1 / math.sqrt(spec.behavior_dim)
    n_items = spec.clusters * spec.items_per_cluster
    vectors = np.repeat(centers, spec.items_per_cluster, axis=0)
    vectors = vectors + rng.normal(0.0, sigma, size=(n_items, spec.behavior_dim))
    cache = EmbeddingCache(np.arange(n_items, dtype=np.int64), vectors)

    records: list[SampleRecord] = []
    for _ in range(spec.users):
        interests = np.sort(rng.choice(spec.clusters, size=spec.interests_per_user, replace=False))
        user_vec = f32_grid(rng.standard_normal(spec.user_dim))
        drawn_clusters = rng.choice(interests, size=spec.seq_len)
        offsets = rng.integers(0, spec.items_per_cluster, size=spec.seq_len)
        behavior_ids = drawn_clusters * spec.items_per_cluster + offsets
        target_cluster = int(rng.integers(0, spec.clusters))
        target_id = target_cluster * spec.items_per_cluster + int(
            rng.integers(0, spec.items_per_cluster)
        )
        label = int(target_cluster in interests)
        if rng.random() < spec.noise_rate:
            label = 1 - label
        records.append(
            SampleRecord(
                user_vec=[float(v) for v in user_vec],
                behavior_ids=[int(i) for i in behavior_ids],
                target_id=target_id,
                label=label,
                target_cluster=target_cluster,
                user_clusters=[int(k) for k in interests],
            )
        )
    n = len(records)
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    splits = {
        "train": records[:n_train],
        "val": records[n_train : n_train + n_val],
        "test": records[n_train + n_val :],
    }
    return SyntheticDataset(spec=spec, cache=cache, splits=splits)


def cluster_of(item_id: int, spec: SyntheticSpec) -> int:
    return int(item_id) // spec.items_per_cluster


def write_dataset(dataset: SyntheticDataset, out_dir) -> None:
    """spec.json + items.tbec + one JSONL file per split, byte-deterministic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(asdict(dataset.spec), indent=2, sort_keys=True) + "\n")
    dataset.cache.save(out / "items.tbec")
    for name in SPLIT_NAMES:
        with open(out / f"{name}.jsonl", "w") as fh:
            for record in dataset.splits[name]:
                fh.write(json.dumps(asdict(record), sort_keys=True))
                fh.write("\n")


def load_dataset(path) -> SyntheticDataset:
    root = Path(path)
    spec = SyntheticSpec(**json.loads((root / "spec.json").read_text()))
    cache = EmbeddingCache.load(root / "items.tbec")
    splits: dict[str, list[SampleRecord]] = {}
    for name in SPLIT_NAMES:
        with open(root / f"{name}.jsonl") as fh:
            splits[name] = [SampleRecord(**json.loads(line)) for line in fh if line.strip()]
    return SyntheticDataset(spec=spec, cache=cache, splits=splits)


def as_samples(
    records: Sequence[SampleRecord], cache: EmbeddingCache, seq_len: int | None = None
) -> list[Sample]:
    """Resolve records through the cache.

    seq_len keeps only the most recent behaviors, which is how the
    sequence-length ablation shortens the input.
    """
    samples = []
    for r in records:
        ids = r.behavior_ids if seq_len is None else r.behavior_ids[-seq_len:]
        if not ids:
            raise ConfigError("record has no behaviors after truncation")
        samples.append(
            Sample(
                user=np.array(r.user_vec, dtype=np.float64),
                target=cache.lookup([r.target_id])[0],
                behaviors=cache.lookup(ids),
                label=r.label,
            )
        )
    return samples
