"""Byte formats for remote memory: serialized sub-clusters, the cluster
directory, and shared overflow regions.

Region map::

    [directory][pad to 8][insert epoch u32 + pad][group 0][group 1]...

    group = [head cluster][overflow region][tail cluster]

All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import BadMagicError, CapacityError, ChecksumError, CodecError, TruncatedError
from .hnsw import HnswGraph, HnswParams
from .partition import SubCluster

CLUSTER_MAGIC = b"DSUB"
DIRECTORY_MAGIC = b"DHNM"
NO_ENTRY = 0xFFFFFFFF

_CLUSTER_HEADER = struct.Struct("<4sIIIIB")
_DIR_HEADER = struct.Struct("<4sQIII")
_DIR_ENTRY = struct.Struct("<IBQQQQ")
_OVERFLOW_HEADER = struct.Struct("<II")
_CRC = struct.Struct("<I")

OVERFLOW_HEADER_SIZE = _OVERFLOW_HEADER.size
HEAD, TAIL = 0, 1
MiB = 1 << 20


def align8(n: int) -> int:
    return (n + 7) & ~7


# -- serialized clusters ------------------------------------------------


def encode_cluster(sub: SubCluster) -> bytes:
    g = sub.graph
    n = len(g)
    entry, levels, links = g.local_structure()
    out = bytearray(
        _CLUSTER_HEADER.pack(
            CLUSTER_MAGIC, sub.cluster_id, n, g.dim, NO_ENTRY if n == 0 else entry, max(g.max_level, 0)
        )
    )
    out += bytes(levels)
    words: List[int] = []
    for node in links:
        for adj in node:
            words.append(len(adj))
            words.extend(adj)
    out += np.asarray(words, dtype="<u4").tobytes()
    out += np.asarray(g.ids, dtype="<u8").tobytes()
    out += np.ascontiguousarray(g.vectors, dtype="<f4").tobytes()
    out += _CRC.pack(zlib.crc32(out))
    return bytes(out)


def decode_cluster(data: bytes, params: Optional[HnswParams] = None) -> SubCluster:
    """Decode one serialized cluster from the front of ``data``.

    Bytes after the checksum trailer (layout padding, overflow space) are
    ignored.
    """
    buf = memoryview(data)
    if len(buf) < _CLUSTER_HEADER.size + _CRC.size:
        raise TruncatedError(f"cluster blob of {len(buf)} bytes is shorter than its header")
    magic, cluster_id, n, dim, entry, max_level = _CLUSTER_HEADER.unpack_from(buf, 0)
    if magic != CLUSTER_MAGIC:
        raise BadMagicError(f"bad cluster magic {bytes(magic)!r}")
    pos = _CLUSTER_HEADER.size
    fixed_tail = n * 8 + n * dim * 4 + _CRC.size
    if pos + n + fixed_tail > len(buf):
        raise TruncatedError("cluster blob truncated before its level table")
    levels = list(buf[pos : pos + n])
    pos += n

    budget = (len(buf) - pos - fixed_tail) // 4
    words = np.frombuffer(buf, dtype="<u4", count=budget, offset=pos).tolist() if budget > 0 else []
    w = 0
    links: List[List[List[int]]] = []
    for lv in levels:
        node = []
        for _ in range(lv + 1):
            if w >= len(words):
                raise TruncatedError("cluster blob truncated inside the adjacency table")
            cnt = words[w]
            if w + 1 + cnt > len(words):
                raise TruncatedError("cluster blob truncated inside the adjacency table")
            node.append(words[w + 1 : w + 1 + cnt])
            w += 1 + cnt
        links.append(node)
    pos += 4 * w

    end = pos + n * 8 + n * dim * 4
    (stored,) = _CRC.unpack_from(buf, end)
    if zlib.crc32(buf[:end]) != stored:
        raise ChecksumError(f"crc mismatch in cluster {cluster_id}")

    if n and (entry >= n or levels[entry] != max_level or max(levels) != max_level):
        raise CodecError("inconsistent entry point or level table")
    for node in links:
        for adj in node:
            if adj and max(adj) >= n:
                raise CodecError("adjacency references a node outside the cluster")
    ids = np.frombuffer(buf, dtype="<u8", count=n, offset=pos).tolist()
    vectors = np.frombuffer(buf, dtype="<f4", count=n * dim, offset=pos + n * 8).reshape(n, dim)
    graph = HnswGraph.from_parts(dim, ids, levels, links, vectors, entry, params)
    return SubCluster(cluster_id, graph)


# -- directory ----------------------------------------------------------


@dataclass(frozen=True)
class DirectoryEntry:
    group_index: int
    slot: int
    cluster_offset: int
    cluster_len: int
    overflow_offset: int
    overflow_capacity: int


@dataclass(frozen=True)
class ClusterDirectory:
    version: int
    dim: int
    num_groups: int
    entries: Tuple[DirectoryEntry, ...]

    @property
    def num_clusters(self) -> int:
        return len(self.entries)

    @property
    def size(self) -> int:
        return directory_size(self.num_clusters)

    @property
    def epoch_offset(self) -> int:
        return align8(self.size)

    @property
    def data_start(self) -> int:
        return self.epoch_offset + 8

    @property
    def end(self) -> int:
        """One past the last byte of the last group."""
        last = 0
        for e in self.entries:
            last = max(last, e.cluster_offset + e.cluster_len, e.overflow_offset + e.overflow_capacity)
        return max(last, self.data_start)

    def entry(self, cluster_id: int) -> DirectoryEntry:
        if not 0 <= cluster_id < len(self.entries):
            raise KeyError(f"unknown cluster id {cluster_id}")
        return self.entries[cluster_id]

    def group(self, group_index: int) -> List[int]:
        return [c for c, e in enumerate(self.entries) if e.group_index == group_index]

    def with_version(self, version: int) -> "ClusterDirectory":
        if version <= self.version:
            raise ValueError("directory versions must strictly increase")
        return replace(self, version=version)

    def to_bytes(self) -> bytes:
        out = bytearray(_DIR_HEADER.pack(DIRECTORY_MAGIC, self.version, self.dim, len(self.entries), self.num_groups))
        for e in self.entries:
            out += _DIR_ENTRY.pack(
                e.group_index, e.slot, e.cluster_offset, e.cluster_len, e.overflow_offset, e.overflow_capacity
            )
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ClusterDirectory":
        magic, version, dim, n, groups = read_directory_header(data)
        need = directory_size(n)
        if len(data) < need:
            raise TruncatedError(f"directory needs {need} bytes, got {len(data)}")
        entries = tuple(
            DirectoryEntry(*_DIR_ENTRY.unpack_from(data, _DIR_HEADER.size + i * _DIR_ENTRY.size)) for i in range(n)
        )
        return cls(version, dim, groups, entries)


DIRECTORY_HEADER_SIZE = _DIR_HEADER.size
DIRECTORY_ENTRY_SIZE = _DIR_ENTRY.size


def directory_size(num_clusters: int) -> int:
    return _DIR_HEADER.size + num_clusters * _DIR_ENTRY.size


def read_directory_header(data: bytes) -> Tuple[bytes, int, int, int, int]:
    if len(data) < _DIR_HEADER.size:
        raise TruncatedError("directory header truncated")
    fields = _DIR_HEADER.unpack_from(data, 0)
    if fields[0] != DIRECTORY_MAGIC:
        raise BadMagicError(f"bad directory magic {fields[0]!r}")
    return fields


def plan_layout(
    cluster_sizes: Sequence[int],
    overflow_capacity: int,
    policy: str = "sequential",
    *,
    dim: int = 0,
    version: int = 1,
) -> ClusterDirectory:
    """Pair clusters two per group and assign byte offsets.

    Cluster regions are padded to 8 bytes so every overflow header is
    aligned for fetch-add; ``cluster_len`` records the padded length.
    """
    if not cluster_sizes:
        raise ValueError("cannot lay out zero clusters")
    if overflow_capacity < OVERFLOW_HEADER_SIZE:
        raise ValueError(f"overflow capacity must be at least {OVERFLOW_HEADER_SIZE} bytes")
    if policy != "sequential":
        raise ValueError(f"unknown pairing policy {policy!r}")
    n = len(cluster_sizes)
    num_groups = (n + 1) // 2
    cursor = align8(directory_size(n)) + 8
    entries: List[DirectoryEntry] = []
    for g in range(num_groups):
        cursor = align8(cursor)
        head = align8(cluster_sizes[2 * g])
        overflow_offset = cursor + head
        entries.append(DirectoryEntry(g, HEAD, cursor, head, overflow_offset, overflow_capacity))
        cursor = overflow_offset + overflow_capacity
        if 2 * g + 1 < n:
            tail = align8(cluster_sizes[2 * g + 1])
            entries.append(DirectoryEntry(g, TAIL, cursor, tail, overflow_offset, overflow_capacity))
            cursor += tail
    return ClusterDirectory(version, dim, num_groups, tuple(entries))


def contiguous_read_extent(directory: ClusterDirectory, cluster_id: int) -> Tuple[int, int]:
    e = directory.entry(cluster_id)
    if e.slot == HEAD:
        return e.cluster_offset, e.cluster_len + e.overflow_capacity
    return e.overflow_offset, e.overflow_capacity + e.cluster_len


def split_extent(entry: DirectoryEntry, extent: bytes) -> Tuple[bytes, bytes]:
    """(cluster bytes, overflow region bytes) of a contiguous extent read."""
    if entry.slot == HEAD:
        return extent[: entry.cluster_len], extent[entry.cluster_len :]
    return extent[entry.overflow_capacity :], extent[: entry.overflow_capacity]


# -- overflow regions ---------------------------------------------------


def overflow_entry_size(dim: int) -> int:
    return 8 + 4 * dim


def overflow_max_entries(capacity: int, dim: int) -> int:
    return max(0, (capacity - OVERFLOW_HEADER_SIZE) // overflow_entry_size(dim))


def overflow_capacity_for(entries: int, dim: int) -> int:
    return OVERFLOW_HEADER_SIZE + entries * overflow_entry_size(dim)


def overflow_entry_offset(capacity: int, slot: int, index: int, dim: int) -> int:
    """Offset of the ``index``-th entry of ``slot``, relative to the region start."""
    size = overflow_entry_size(dim)
    if slot == HEAD:
        return OVERFLOW_HEADER_SIZE + index * size
    return capacity - (index + 1) * size


def pack_overflow_entry(vector_id: int, values: np.ndarray) -> bytes:
    return struct.pack("<Q", vector_id) + np.ascontiguousarray(values, dtype="<f4").tobytes()


def append_overflow(
    region: bytearray, slot: int, entry: Tuple[int, Sequence[float]]
) -> Tuple[Tuple[int, int], int]:
    """Append ``(vector_id, values)`` in place; returns ((low, high), write offset)."""
    vector_id, values = entry
    values = np.asarray(values, dtype=np.float32).reshape(-1)
    dim = values.shape[0]
    low, high = _OVERFLOW_HEADER.unpack_from(region, 0)
    if low + high + 1 > overflow_max_entries(len(region), dim):
        raise CapacityError("overflow region full; cluster needs rebuild")
    index = low if slot == HEAD else high
    offset = overflow_entry_offset(len(region), slot, index, dim)
    region[offset : offset + overflow_entry_size(dim)] = pack_overflow_entry(vector_id, values)
    header = (low + 1, high) if slot == HEAD else (low, high + 1)
    _OVERFLOW_HEADER.pack_into(region, 0, *header)
    return header, offset


OverflowEntries = Tuple[np.ndarray, np.ndarray]


def parse_overflow_arrays(region: bytes, dim: int) -> Tuple[OverflowEntries, OverflowEntries]:
    """((low ids, low vectors), (high ids, high vectors)) as numpy arrays."""
    if len(region) < OVERFLOW_HEADER_SIZE:
        raise TruncatedError("overflow region shorter than its header")
    low, high = _OVERFLOW_HEADER.unpack_from(region, 0)
    limit = overflow_max_entries(len(region), dim)
    # a reservation that lost the race for the last slot is visible until it rolls back
    low = min(low, limit)
    high = min(high, limit - low)
    size = overflow_entry_size(dim)
    rec = np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])
    lo = np.frombuffer(region, dtype=rec, count=low, offset=OVERFLOW_HEADER_SIZE)
    hi_start = len(region) - high * size
    hi = np.frombuffer(region, dtype=rec, count=high, offset=hi_start)[::-1]
    return (lo["id"].copy(), lo["v"].copy()), (hi["id"].copy(), hi["v"].copy())


def parse_overflow(region: bytes, dim: int) -> Tuple[List[Tuple[int, np.ndarray]], List[Tuple[int, np.ndarray]]]:
    (li, lv), (hi, hv) = parse_overflow_arrays(region, dim)
    return (
        [(int(i), v) for i, v in zip(li, lv)],
        [(int(i), v) for i, v in zip(hi, hv)],
    )


def read_overflow_header(region: bytes) -> Tuple[int, int]:
    return _OVERFLOW_HEADER.unpack_from(region, 0)


def reference_overflow_capacity(dataset: str) -> int:
    """Per-group overflow bytes used at million-vector scale."""
    sizes = {"sift": 0.75, "gist": 3.92}
    try:
        return int(round(sizes[dataset.lower()] * MiB))
    except KeyError:
        raise ValueError(f"no reference overflow size for {dataset!r}") from None
