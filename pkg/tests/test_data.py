"""Synthetic generator properties and the embedding cache format."""

import math

import numpy as np
import pytest

from chunkctr.data import (
    EmbeddingCache,
    SyntheticSpec,
    as_samples,
    cluster_of,
    generate,
    load_dataset,
    read_cache,
    write_cache,
    write_dataset,
    _separated_centers,
)
from chunkctr.errors import CacheError, ConfigError
from chunkctr.lsh import ProjectionMatrix, bucket_ids, hash_codes
from chunkctr.model import auc

SMALL = SyntheticSpec(
    clusters=4,
    behavior_dim=12,
    items_per_cluster=6,
    users=120,
    seq_len=10,
    interests_per_user=2,
    noise_rate=0.1,
    user_dim=4,
    seed=3,
)


def _membership_labels(records):
    truth = np.array([int(r.target_cluster in r.user_clusters) for r in records])
    observed = np.array([r.label for r in records])
    return truth, observed


class TestGenerate:
    def test_same_seed_gives_byte_identical_output(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        write_dataset(generate(SMALL), a_dir)
        write_dataset(generate(SMALL), b_dir)
        for name in ("spec.json", "items.tbec", "train.jsonl", "val.jsonl", "test.jsonl"):
            assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes(), name

    def test_splits_are_disjoint_and_complete(self):
        dataset = generate(SMALL)
        seen = set()
        total = 0
        for records in dataset.splits.values():
            for r in records:
                assert id(r) not in seen
                seen.add(id(r))
            total += len(records)
        assert total == SMALL.users

    def test_behaviors_come_from_user_interest_clusters(self):
        dataset = generate(SMALL)
        for record in dataset.splits["train"][:30]:
            for item in record.behavior_ids:
                assert cluster_of(item, SMALL) in record.user_clusters

    def test_noise_free_two_cluster_task_is_perfectly_separable(self):
        spec = SyntheticSpec(
            clusters=2, behavior_dim=8, items_per_cluster=4, users=300, seq_len=4,
            interests_per_user=1, noise_rate=0.0, user_dim=2, seed=1,
        )
        records = [r for split in generate(spec).splits.values() for r in split]
        truth, observed = _membership_labels(records)
        assert np.array_equal(truth, observed)
        # the membership oracle classifier reaches AUC 1.0 by construction
        assert auc(truth.astype(float), observed) == 1.0

    def test_oracle_auc_matches_analytic_flip_bound(self):
        spec = SyntheticSpec(
            clusters=5, behavior_dim=8, items_per_cluster=4, users=20_000, seq_len=2,
            interests_per_user=2, noise_rate=0.1, user_dim=2, seed=2,
        )
        records = [r for split in generate(spec).splits.values() for r in split]
        truth, observed = _membership_labels(records)
        prior = spec.interests_per_user / spec.clusters
        rho = spec.noise_rate
        p_member_pos = prior * (1 - rho) / (prior * (1 - rho) + (1 - prior) * rho)
        p_member_neg = prior * rho / (prior * rho + (1 - prior) * (1 - rho))
        expected = p_member_pos * (1 - p_member_neg) + 0.5 * (
            p_member_pos * p_member_neg + (1 - p_member_pos) * (1 - p_member_neg)
        )
        got = auc(truth.astype(float), observed)
        assert abs(got - expected) <= 0.02

    def test_label_noise_rate_within_one_percent(self):
        spec = SyntheticSpec(
            clusters=4, behavior_dim=6, items_per_cluster=2, users=100_000, seq_len=1,
            interests_per_user=1, noise_rate=0.2, user_dim=2, seed=4,
        )
        records = [r for split in generate(spec).splits.values() for r in split]
        truth, observed = _membership_labels(records)
        assert abs((truth != observed).mean() - spec.noise_rate) <= 0.01

    def test_cluster_centers_respect_minimum_angle(self):
        rng = np.random.default_rng(5)
        centers = _separated_centers(rng, SMALL)
        for i in range(len(centers)):
            for j in range(i + 1, len(centers)):
                cos = float(np.dot(centers[i], centers[j]))
                assert cos <= math.cos(math.radians(SMALL.min_center_angle_deg)) + 1e-12

    def test_same_cluster_items_usually_share_a_bucket(self):
        spec = SyntheticSpec(seed=6)  # defaults: 8 clusters, 32 dims, 50 items each
        dataset = generate(spec)
        rng = np.random.default_rng(7)
        hits = 0
        trials = 0
        for seed in range(5):
            projection = ProjectionMatrix.sample(spec.behavior_dim, 4, seed=seed)
            codes = hash_codes(dataset.cache.vectors, projection)
            ids = bucket_ids(codes)
            for _ in range(2000):
                cluster = rng.integers(0, spec.clusters)
                a, b = rng.choice(spec.items_per_cluster, size=2, replace=False)
                i = cluster * spec.items_per_cluster + a
                j = cluster * spec.items_per_cluster + b
                hits += int(ids[i] == ids[j])
                trials += 1
        assert hits / trials >= 0.80

    def test_infeasible_spec_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(clusters=2, interests_per_user=3)
        with pytest.raises(ConfigError):
            SyntheticSpec(noise_rate=0.5)
        with pytest.raises(ConfigError):
            SyntheticSpec(clusters=1)


class TestDatasetIO:
    def test_write_then_load_round_trips(self, tmp_path):
        dataset = generate(SMALL)
        write_dataset(dataset, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert loaded.spec == SMALL
        assert len(loaded.cache) == len(dataset.cache)
        assert np.array_equal(loaded.cache.vectors, dataset.cache.vectors)
        for name in ("train", "val", "test"):
            assert loaded.splits[name] == dataset.splits[name]

    def test_as_samples_resolves_and_truncates(self):
        dataset = generate(SMALL)
        records = dataset.splits["train"][:5]
        full = as_samples(records, dataset.cache)
        short = as_samples(records, dataset.cache, seq_len=4)
        for record, sample_full, sample_short in zip(records, full, short):
            assert sample_full.behaviors.shape == (SMALL.seq_len, SMALL.behavior_dim)
            assert sample_short.behaviors.shape == (4, SMALL.behavior_dim)
            np.testing.assert_array_equal(
                sample_short.behaviors, dataset.cache.lookup(record.behavior_ids[-4:])
            )
            assert sample_full.label == record.label


class TestEmbeddingCache:
    def test_write_read_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        mapping = {int(i): rng.standard_normal(5) for i in rng.choice(10_000, size=64, replace=False)}
        path = tmp_path / "items.tbec"
        write_cache(path, mapping)
        cache = EmbeddingCache.load(path)
        for item, vector in mapping.items():
            stored = cache.lookup([item])[0]
            assert np.array_equal(stored, vector.astype(np.float32).astype(np.float64))
        cache.save(tmp_path / "copy.tbec")
        assert (tmp_path / "copy.tbec").read_bytes() == path.read_bytes()

    def test_missing_id_error_names_it(self, tmp_path):
        path = tmp_path / "items.tbec"
        write_cache(path, {1: np.zeros(3), 2: np.ones(3)})
        with pytest.raises(CacheError, match="7777"):
            read_cache(path, [1, 7777])

    def test_large_cache_random_access_matches_map(self, tmp_path):
        rng = np.random.default_rng(9)
        ids = rng.choice(1_000_000, size=10_000, replace=False)
        vectors = rng.standard_normal((10_000, 8))
        mapping = {int(i): v for i, v in zip(ids, vectors)}
        path = tmp_path / "big.tbec"
        write_cache(path, mapping)
        cache = EmbeddingCache.load(path)
        sampled = rng.choice(ids, size=1000, replace=True)
        rows = cache.lookup(sampled)
        for row, item in zip(rows, sampled):
            expect = mapping[int(item)].astype(np.float32).astype(np.float64)
            assert np.array_equal(row, expect)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "items.tbec"
        write_cache(path, {1: np.zeros(3)})
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(CacheError):
            EmbeddingCache.load(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "items.tbec"
        write_cache(path, {1: np.zeros(3)})
        blob = bytearray(path.read_bytes())
        blob[4] = 42
        path.write_bytes(bytes(blob))
        with pytest.raises(CacheError):
            EmbeddingCache.load(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "items.tbec"
        write_cache(path, {1: np.zeros(3), 2: np.ones(3)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(CacheError):
            EmbeddingCache.load(path)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(CacheError):
            EmbeddingCache(np.array([1, 1]), np.zeros((2, 3)))

    def test_empty_mapping_rejected(self, tmp_path):
        with pytest.raises(CacheError):
            write_cache(tmp_path / "empty.tbec", {})
