import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhnsw.builder import encode_meta
from dhnsw.hnsw import HnswParams, VectorRecord
from dhnsw.partition import (
    build_meta,
    classify,
    classify_topb,
    default_ef_meta,
    partition_dataset,
    sample_representatives,
)

from conftest import random_records


def nearest_rep(reps, v):
    d = [float(np.sum((r.values.astype(np.float64) - np.asarray(v, dtype=np.float64)) ** 2)) for r in reps]
    return sorted(range(len(reps)), key=lambda i: (d[i], i))


def test_sample_whole_dataset():
    recs = random_records(20, 3)
    assert [r.id for r in sample_representatives(recs, 20, seed=1)] == list(range(20))


def test_sample_deterministic_distinct():
    recs = random_records(1000, 2)
    a = sample_representatives(recs, 50, seed=3)
    b = sample_representatives(recs, 50, seed=3)
    assert [r.id for r in a] == [r.id for r in b]
    assert len({r.id for r in a}) == 50


def test_sample_500_reps():
    # 500 representatives, as used at million-vector scale; the draw itself does not touch vectors
    recs = random_records(20_000, 1)
    assert len(sample_representatives(recs, 500, seed=0)) == 500


def test_sample_too_many():
    with pytest.raises(ValueError):
        sample_representatives(random_records(3, 2), 4)


def test_meta_single_rep():
    meta = build_meta([VectorRecord(77, [1.0, 1.0])])
    assert meta.num_partitions == 1
    assert meta.entry == 0
    assert classify(meta, [50.0, -3.0]) == 0


def test_meta_level_cap():
    meta = build_meta(random_records(64, 8, seed=2), HnswParams(seed=2), seed=2)
    assert meta.graph.max_level <= 2
    assert all(meta.graph.level_of(p) <= 2 for p in range(64))
    assert meta.graph.layer_population(0) == 64


def test_meta_size_500_reps_128d():
    # reference figure: about 0.373 MB for 500 representatives of 128-d vectors
    reps = random_records(500, 128, seed=4)
    size = len(encode_meta(build_meta(reps, HnswParams(seed=4), seed=4)))
    assert abs(size / 1e6 - 0.373) <= 0.25 * 0.373


def test_meta_size_independent_of_dataset():
    small = random_records(40, 8, seed=5)
    meta = build_meta(small, HnswParams(seed=5), seed=5)
    assert len(encode_meta(meta)) < 40 * (8 * 4 + 8 + 4 * 2 * 16 + 40) + 64


SQUARE = [(0, 0), (10, 0), (0, 10), (10, 10)]


def square_meta():
    return build_meta([VectorRecord(100 + i, p) for i, p in enumerate(SQUARE)])


def test_classify_square():
    assert classify(square_meta(), [9, 1], ef_meta=4) == 1


def test_classify_exact_rep():
    reps = random_records(30, 5, seed=6)
    meta = build_meta(reps, HnswParams(seed=6), seed=6)
    for i, r in enumerate(reps):
        assert classify(meta, r.values, ef_meta=30) == i


def test_topb_all_is_brute_force_order():
    reps = random_records(25, 4, seed=7)
    meta = build_meta(reps, HnswParams(seed=7), seed=7)
    q = np.random.default_rng(8).normal(size=4)
    assert classify_topb(meta, q, 25, ef_meta=25) == nearest_rep(reps, q)


def test_topb_one_matches_classify():
    reps = random_records(25, 4, seed=9)
    meta = build_meta(reps, HnswParams(seed=9), seed=9)
    for q in np.random.default_rng(10).normal(size=(20, 4)):
        assert classify_topb(meta, q, 1, ef_meta=16) == [classify(meta, q, ef_meta=16)]


# planted 2-d geometry for the four-query, six-cluster batch:
# S1 S4 S5 along y=0, S2 S3 S6 along y=10, partition 0 far away
PLANTED_REPS = [(100, 100), (0, 0), (-2, 10), (0, 10), (2, 0), (4, 0), (2, 10)]
PLANTED_QUERIES = [(0.9, 0), (-0.9, 10), (3.1, 0), (0.9, 10)]


def planted_meta():
    return build_meta([VectorRecord(i, p) for i, p in enumerate(PLANTED_REPS)])


def test_planted_batch_requirements():
    meta = planted_meta()
    got = [set(classify_topb(meta, q, 2, ef_meta=len(PLANTED_REPS))) for q in PLANTED_QUERIES]
    assert got == [{1, 4}, {3, 2}, {4, 5}, {3, 6}]


def test_topb_too_large():
    with pytest.raises(ValueError):
        classify_topb(square_meta(), [0, 0], 5)


def test_default_ef_meta():
    assert default_ef_meta(1) == 16
    assert default_ef_meta(20) == 40


def test_dataset_equals_reps():
    reps = random_records(12, 3, seed=11)
    meta = build_meta(reps, HnswParams(seed=11), seed=11)
    assignment, subs = partition_dataset(meta, reps, ef_meta=12)
    assert assignment.cluster_of == {r.id: i for i, r in enumerate(reps)}
    assert [s.graph.ids for s in subs] == [[r.id] for r in reps]


def test_planted_blobs():
    rng = np.random.default_rng(12)
    centers = np.array([[0, 0], [50, 0], [0, 50], [50, 50]], dtype=np.float32)
    labels = rng.integers(0, 4, size=2000)
    pts = centers[labels] + rng.normal(scale=3.0, size=(2000, 2))
    data = [VectorRecord(i, p) for i, p in enumerate(pts)]
    meta = build_meta([VectorRecord(10_000 + i, c) for i, c in enumerate(centers)])
    assignment, _ = partition_dataset(meta, data, ef_meta=4)
    agree = np.mean([assignment.cluster_of[i] == labels[i] for i in range(2000)])
    assert agree >= 0.99


def test_empty_partition_omitted():
    reps = [VectorRecord(0, [0, 0]), VectorRecord(1, [1000, 1000])]
    data = [VectorRecord(i, [i * 0.1, 0]) for i in range(5)]
    assignment, subs = partition_dataset(build_meta(reps), data)
    assert [s.cluster_id for s in subs] == [0]
    assert set(assignment.cluster_of.values()) == {0}


def test_sub_entry_is_representative():
    recs = random_records(400, 6, seed=13)
    reps = sample_representatives(recs, 8, seed=13)
    meta = build_meta(reps, HnswParams(seed=13), seed=13)
    assignment, subs = partition_dataset(meta, recs, params=HnswParams(ef_construction=32, seed=13))
    for s in subs:
        rep = reps[s.cluster_id].id
        members = [v for v, c in assignment.cluster_of.items() if c == s.cluster_id]
        expect = rep if rep in members else next(r.id for r in recs if r.id in members)
        assert s.graph.entry_point == expect


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 120), R=st.integers(1, 12), seed=st.integers(0, 500))
def test_partition_is_exact_cover(n, R, seed):
    recs = random_records(n, 3, seed=seed)
    R = min(R, n)
    reps = sample_representatives(recs, R, seed)
    meta = build_meta(reps, HnswParams(seed=seed), seed=seed)
    assignment, subs = partition_dataset(meta, recs, ef_meta=R, params=HnswParams(ef_construction=16, seed=seed))
    assert len(assignment.cluster_of) == n
    assert all(0 <= c < R for c in assignment.cluster_of.values())
    members = [set(s.graph.ids) for s in subs]
    assert sum(len(m) for m in members) == n
    assert set().union(*members) == {r.id for r in recs}
    for s in subs:
        assert all(assignment.cluster_of[v] == s.cluster_id for v in s.graph.ids)
    # with ef_meta = R the descent is the exact nearest representative
    for r in recs:
        assert assignment.cluster_of[r.id] == nearest_rep(reps, r.values)[0]


@settings(max_examples=20, deadline=None)
@given(R=st.integers(2, 20), b=st.integers(1, 20), seed=st.integers(0, 500))
def test_topb_distinct_sorted(R, b, seed):
    b = min(b, R)
    reps = random_records(R, 3, seed=seed)
    meta = build_meta(reps, HnswParams(seed=seed), seed=seed)
    q = np.random.default_rng(seed).normal(size=3)
    got = classify_topb(meta, q, b, ef_meta=R)
    assert len(set(got)) == b
    assert got == nearest_rep(reps, q)[:b]
