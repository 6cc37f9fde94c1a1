"""Hashing, bucket ids, and stable sorting against independent oracles."""

import math

import numpy as np
import pytest

from chunkctr.errors import ConfigError, ShapeError
from chunkctr.lsh import (
    HashAssignment,
    ProjectionMatrix,
    assign_buckets,
    bucket_ids,
    hash_codes,
    invert_permutation,
    stable_sort,
)


class TestHashCodes:
    def test_zero_row_hashes_to_zero(self):
        proj = ProjectionMatrix.sample(6, 4, seed=0)
        codes = hash_codes(np.zeros((1, 6)), proj)
        assert np.array_equal(codes, np.zeros((1, 4), dtype=np.uint8))

    def test_negation_gives_complement_codes(self):
        rng = np.random.default_rng(1)
        proj = ProjectionMatrix.sample(8, 6, seed=2)
        x = rng.standard_normal((5, 8))
        # exact-zero projections would break complementarity; rule them out
        assert (x @ proj.matrix != 0.0).all()
        codes = hash_codes(np.vstack([x, -x]), proj)
        assert np.array_equal(codes[:5], 1 - codes[5:])

    def test_dimension_mismatch(self):
        proj = ProjectionMatrix.sample(6, 4, seed=0)
        with pytest.raises(ShapeError):
            hash_codes(np.zeros((2, 5)), proj)

    def test_collision_frequency_tracks_angle(self):
        # sign-agreement probability for vectors at angle theta is 1 - theta/pi
        theta = math.radians(60.0)
        dim = 16
        pair = np.zeros((2, dim))
        pair[0, 0] = 1.0
        pair[1, 0] = math.cos(theta)
        pair[1, 1] = math.sin(theta)
        proj = ProjectionMatrix.sample(dim, 10_000, seed=7)
        codes = hash_codes(pair, proj)
        freq = (codes[0] == codes[1]).mean()
        assert abs(freq - (1.0 - theta / math.pi)) <= 0.02


class TestBucketIds:
    def test_big_endian_reading(self):
        assert bucket_ids(np.array([[1, 0, 1]], dtype=np.uint8))[0] == 5

    def test_zero_code(self):
        assert bucket_ids(np.zeros((1, 4), dtype=np.uint8))[0] == 0

    def test_matches_string_grouping_oracle(self):
        rng = np.random.default_rng(3)
        proj = ProjectionMatrix.sample(8, 5, seed=4)
        codes = hash_codes(rng.standard_normal((64, 8)), proj)
        ids = bucket_ids(codes)
        strings = ["".join(str(b) for b in row) for row in codes]
        for i in range(64):
            for j in range(64):
                assert (ids[i] == ids[j]) == (strings[i] == strings[j])

    def test_too_many_bits_rejected(self):
        with pytest.raises(ConfigError):
            bucket_ids(np.zeros((1, 63), dtype=np.uint8))


class TestStableSort:
    def test_all_equal_ids_keep_order(self):
        x = np.arange(12, dtype=float).reshape(4, 3)
        assignment, out = stable_sort(x, np.zeros(4, dtype=np.int64))
        assert np.array_equal(assignment.perm, np.arange(4))
        assert np.array_equal(out, x)

    def test_hand_checked_permutation(self):
        x = np.arange(8, dtype=float).reshape(4, 2)
        assignment, _ = stable_sort(x, np.array([2, 0, 1, 0]))
        assert assignment.perm.tolist() == [1, 3, 2, 0]
        assert assignment.inverse_perm.tolist() == [3, 0, 2, 1]

    def test_matches_comparison_sort_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((256, 4))
        ids = rng.integers(0, 16, size=256)
        assignment, out = stable_sort(x, ids)
        oracle_perm = sorted(range(256), key=lambda i: (ids[i], i))
        assert assignment.perm.tolist() == oracle_perm
        assert np.array_equal(ids[assignment.perm], np.sort(ids, kind="stable"))
        # round-trip: unsorting restores the input bit-exactly
        assert np.array_equal(out[assignment.inverse_perm], x)

    def test_roundtrip_many_lengths(self):
        rng = np.random.default_rng(6)
        for length in (1, 2, 7, 64, 256):
            x = rng.standard_normal((length, 3))
            ids = rng.integers(0, 4, size=length)
            assignment, out = stable_sort(x, ids)
            assert np.array_equal(out[assignment.inverse_perm], x)
            assert np.array_equal(
                assignment.perm[assignment.inverse_perm], np.arange(length)
            )

    def test_sorted_ids_form_contiguous_blocks(self):
        rng = np.random.default_rng(7)
        ids = rng.integers(0, 8, size=100)
        assignment, _ = stable_sort(rng.standard_normal((100, 2)), ids)
        sorted_ids = ids[assignment.perm]
        seen = set()
        previous = None
        for v in sorted_ids.tolist():
            if v != previous:
                assert v not in seen
                seen.add(v)
                previous = v

    def test_id_length_mismatch(self):
        with pytest.raises(ShapeError):
            stable_sort(np.zeros((3, 2)), np.zeros(4, dtype=np.int64))


class TestDeterminismAndImmutability:
    def test_identical_inputs_identical_assignment(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((32, 8))
        a1, s1 = assign_buckets(x, ProjectionMatrix.sample(8, 4, seed=11))
        a2, s2 = assign_buckets(x, ProjectionMatrix.sample(8, 4, seed=11))
        assert np.array_equal(a1.codes, a2.codes)
        assert np.array_equal(a1.bucket_ids, a2.bucket_ids)
        assert np.array_equal(a1.perm, a2.perm)
        assert np.array_equal(s1, s2)

    def test_assignment_carries_codes(self):
        rng = np.random.default_rng(9)
        assignment, _ = assign_buckets(rng.standard_normal((8, 6)), ProjectionMatrix.sample(6, 3, seed=0))
        assert isinstance(assignment, HashAssignment)
        assert assignment.codes.shape == (8, 3)
        assert np.array_equal(bucket_ids(assignment.codes), assignment.bucket_ids)

    def test_projection_matrix_is_read_only(self):
        proj = ProjectionMatrix.sample(4, 4, seed=0)
        with pytest.raises(ValueError):
            proj.matrix[0, 0] = 1.0

    def test_invert_permutation(self):
        perm = np.array([2, 0, 3, 1])
        assert invert_permutation(perm).tolist() == [1, 3, 0, 2]
