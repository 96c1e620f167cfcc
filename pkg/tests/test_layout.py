import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhnsw.errors import BadMagicError, CapacityError, ChecksumError, CodecError, TruncatedError
from dhnsw.hnsw import HnswGraph, HnswParams, build
from dhnsw.layout import (
    HEAD,
    OVERFLOW_HEADER_SIZE,
    TAIL,
    ClusterDirectory,
    append_overflow,
    contiguous_read_extent,
    decode_cluster,
    directory_size,
    encode_cluster,
    overflow_capacity_for,
    overflow_entry_size,
    reference_overflow_capacity,
    parse_overflow,
    plan_layout,
    read_overflow_header,
    split_extent,
)
from dhnsw.partition import SubCluster

from conftest import random_records


def make_cluster(n, dim, seed, cid=3, M=6):
    return SubCluster(cid, build(random_records(n, dim, seed=seed), HnswParams(M=M, ef_construction=24, seed=seed)))


def same_behaviour(a, b, dim, seed, probes=20):
    assert a.cluster_id == b.cluster_id
    assert a.graph.local_structure() == b.graph.local_structure()
    assert a.graph.ids == b.graph.ids
    for q in np.random.default_rng(seed).normal(size=(probes, dim)):
        assert a.graph.search(q, k=5, ef_search=16) == b.graph.search(q, k=5, ef_search=16)


def test_empty_cluster_round_trip():
    blob = encode_cluster(SubCluster(9, HnswGraph(4)))
    assert len(blob) == struct.calcsize("<4sIIIIB") + 4
    sub = decode_cluster(blob)
    assert sub.cluster_id == 9 and len(sub.graph) == 0 and sub.graph.dim == 4


def test_header_fields_bit_exact():
    sub = make_cluster(5, 3, seed=1, cid=7)
    blob = encode_cluster(sub)
    magic, cid, n, dim, entry, max_level = struct.unpack_from("<4sIIIIB", blob, 0)
    assert (magic, cid, n, dim, max_level) == (b"DSUB", 7, 5, 3, sub.graph.max_level)
    assert sub.graph.ids[entry] == sub.graph.entry_point
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    ids = np.frombuffer(blob, dtype="<u8", count=5, offset=len(blob) - 4 - 5 * 3 * 4 - 5 * 8)
    assert ids.tolist() == sub.graph.ids
    vecs = np.frombuffer(blob, dtype="<f4", count=15, offset=len(blob) - 4 - 60).reshape(5, 3)
    assert np.array_equal(vecs, sub.graph.vectors)


def test_100_vector_round_trip():
    sub = make_cluster(100, 8, seed=2)
    same_behaviour(sub, decode_cluster(encode_cluster(sub)), 8, seed=3)


def test_flip_vector_byte():
    blob = bytearray(encode_cluster(make_cluster(50, 4, seed=4)))
    blob[-10] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_cluster(bytes(blob))


def test_bad_magic_and_truncation():
    blob = encode_cluster(make_cluster(20, 4, seed=5))
    with pytest.raises(BadMagicError):
        decode_cluster(b"XXXX" + blob[4:])
    with pytest.raises(TruncatedError):
        decode_cluster(blob[:-7])
    with pytest.raises(TruncatedError):
        decode_cluster(blob[:10])


@settings(max_examples=30)
@given(n=st.integers(0, 40), dim=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_codec_round_trip_property(n, dim, seed):
    sub = make_cluster(n, dim, seed, cid=seed % 100) if n else SubCluster(seed % 100, HnswGraph(dim))
    back = decode_cluster(encode_cluster(sub))
    if n:
        same_behaviour(sub, back, dim, seed, probes=3)
    else:
        assert len(back.graph) == 0


@settings(max_examples=40)
@given(seed=st.integers(0, 10_000), data=st.data())
def test_any_single_byte_corruption_detected(seed, data):
    blob = encode_cluster(make_cluster(12, 3, seed))
    pos = data.draw(st.integers(0, len(blob) - 1))
    bit = data.draw(st.integers(1, 255))
    bad = bytearray(blob)
    bad[pos] ^= bit
    with pytest.raises(CodecError):
        decode_cluster(bytes(bad))


def test_four_clusters_two_groups():
    d = plan_layout([100, 200, 300, 400], overflow_capacity=64)
    assert d.num_groups == 2
    g0_end = d.entries[1].cluster_offset + d.entries[1].cluster_len
    assert d.entries[2].cluster_offset >= g0_end
    assert d.entries[2].cluster_offset - g0_end < 8


def test_five_clusters_three_groups():
    d = plan_layout([80, 80, 80, 80, 80], overflow_capacity=64)
    assert d.num_groups == 3
    assert d.group(2) == [4]
    assert d.entries[4].slot == HEAD


def test_group_arrangement():
    d = plan_layout([104, 200, 48], overflow_capacity=96)
    h, t = d.entries[0], d.entries[1]
    assert h.slot == HEAD and t.slot == TAIL
    assert h.cluster_offset + h.cluster_len == h.overflow_offset == t.overflow_offset
    assert h.overflow_offset + h.overflow_capacity == t.cluster_offset
    assert h.cluster_offset % 8 == 0 and h.overflow_offset % 8 == 0


def test_reference_overflow_sizes():
    assert reference_overflow_capacity("sift") == round(0.75 * 2**20)
    assert reference_overflow_capacity("gist") == round(3.92 * 2**20)


def test_plan_layout_errors():
    with pytest.raises(ValueError):
        plan_layout([], 64)
    with pytest.raises(ValueError):
        plan_layout([10], OVERFLOW_HEADER_SIZE - 1)


def test_extents():
    d = plan_layout([104, 200], overflow_capacity=96)
    h, t = d.entries
    assert contiguous_read_extent(d, 0) == (h.cluster_offset, h.cluster_len + 96)
    assert contiguous_read_extent(d, 1) == (t.overflow_offset, 96 + t.cluster_len)
    (o0, l0), (o1, l1) = contiguous_read_extent(d, 0), contiguous_read_extent(d, 1)
    assert (max(o0, o1), min(o0 + l0, o1 + l1)) == (h.overflow_offset, h.overflow_offset + 96)
    with pytest.raises(KeyError):
        contiguous_read_extent(d, 2)


@settings(max_examples=40)
@given(sizes=st.lists(st.integers(0, 500), min_size=1, max_size=12), cap=st.integers(8, 300))
def test_extents_overlap_only_on_shared_overflow(sizes, cap):
    d = plan_layout(sizes, cap)
    ext = [contiguous_read_extent(d, c) for c in range(len(sizes))]
    for a in range(len(sizes)):
        for b in range(a + 1, len(sizes)):
            lo = max(ext[a][0], ext[b][0])
            hi = min(ext[a][0] + ext[a][1], ext[b][0] + ext[b][1])
            if lo < hi:
                ea, eb = d.entries[a], d.entries[b]
                assert ea.group_index == eb.group_index
                assert (lo, hi) == (ea.overflow_offset, ea.overflow_offset + cap)
    assert d.end >= max(o + n for o, n in ext)


def test_directory_bytes():
    d = plan_layout([104, 200, 48], overflow_capacity=96, dim=16, version=5)
    raw = d.to_bytes()
    assert len(raw) == directory_size(3) == 24 + 3 * 37
    assert struct.unpack_from("<4sQIII", raw, 0) == (b"DHNM", 5, 16, 3, 2)
    e = d.entries[1]
    assert struct.unpack_from("<IBQQQQ", raw, 24 + 37) == (
        e.group_index, e.slot, e.cluster_offset, e.cluster_len, e.overflow_offset, e.overflow_capacity,
    )
    assert ClusterDirectory.from_bytes(raw + b"\0" * 9) == d
    assert d.with_version(6).version == 6
    with pytest.raises(ValueError):
        d.with_version(5)


def test_fresh_overflow_empty():
    assert parse_overflow(bytes(overflow_capacity_for(4, 3)), 3) == ([], [])


def test_overflow_append_and_parse():
    dim = 3
    region = bytearray(overflow_capacity_for(8, dim))
    for i in range(3):
        append_overflow(region, HEAD, (10 + i, [i, i, i]))
    for i in range(2):
        append_overflow(region, TAIL, (20 + i, [-i, 0, 1]))
    low, high = parse_overflow(bytes(region), dim)
    assert [i for i, _ in low] == [10, 11, 12]
    assert [i for i, _ in high] == [20, 21]
    assert np.array_equal(high[1][1], np.array([-1, 0, 1], dtype=np.float32))
    assert read_overflow_header(bytes(region)) == (3, 2)
    # tail entries grow backward from the region end
    assert struct.unpack_from("<Q", region, len(region) - overflow_entry_size(dim))[0] == 20


def test_overflow_capacity_boundary():
    region = bytearray(OVERFLOW_HEADER_SIZE + 2 * overflow_entry_size(2))
    append_overflow(region, HEAD, (1, [0, 0]))
    append_overflow(region, TAIL, (2, [0, 0]))
    with pytest.raises(CapacityError):
        append_overflow(region, HEAD, (3, [0, 0]))


@settings(max_examples=40)
@given(ops=st.lists(st.sampled_from([HEAD, TAIL]), max_size=30), entries=st.integers(0, 20), dim=st.integers(1, 4))
def test_overflow_never_overlaps(ops, entries, dim):
    region = bytearray(overflow_capacity_for(entries, dim))
    expect = {HEAD: [], TAIL: []}
    spans = []
    for n, slot in enumerate(ops):
        if len(expect[HEAD]) + len(expect[TAIL]) == entries:
            with pytest.raises(CapacityError):
                append_overflow(region, slot, (n, [n] * dim))
            continue
        header, off = append_overflow(region, slot, (n, [n] * dim))
        spans.append((off, off + overflow_entry_size(dim)))
        expect[slot].append(n)
        assert OVERFLOW_HEADER_SIZE + sum(header) * overflow_entry_size(dim) <= len(region)
    spans.sort()
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
    assert all(s[0] >= OVERFLOW_HEADER_SIZE for s in spans)
    low, high = parse_overflow(bytes(region), dim)
    assert [i for i, _ in low] == expect[HEAD]
    assert [i for i, _ in high] == expect[TAIL]


def test_extent_carries_overflow_entries():
    blobs = [encode_cluster(make_cluster(10, 2, seed=s, cid=s)) for s in range(2)]
    cap = overflow_capacity_for(4, 2)
    d = plan_layout([len(b) for b in blobs], cap, dim=2)
    image = bytearray(d.end)
    for e, b in zip(d.entries, blobs):
        image[e.cluster_offset : e.cluster_offset + len(b)] = b
    ov = d.entries[0].overflow_offset
    region = image[ov : ov + cap]
    append_overflow(region, HEAD, (500, [1, 1]))
    append_overflow(region, TAIL, (600, [2, 2]))
    image[ov : ov + cap] = region
    for cid, want in ((0, 500), (1, 600)):
        off, length = contiguous_read_extent(d, cid)
        blob, over = split_extent(d.entries[cid], bytes(image[off : off + length]))
        assert decode_cluster(blob).cluster_id == cid
        low, high = parse_overflow(over, 2)
        assert [i for i, _ in (low if cid == 0 else high)] == [want]
