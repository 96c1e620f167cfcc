"""Offline index construction and upload into a memory region."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import BadMagicError, TruncatedError
from .hnsw import HnswParams, VectorRecord
from .layout import (
    ClusterDirectory,
    decode_cluster,
    encode_cluster,
    overflow_capacity_for,
    plan_layout,
)
from .partition import (
    MetaIndex,
    PartitionAssignment,
    SubCluster,
    build_meta,
    partition_dataset,
    sample_representatives,
)
from .transport import Transport

META_MAGIC = b"DMET"
META_CLUSTER_ID = 0xFFFFFFFF

# 0.75 MiB of 128-d entries per group of two 2000-vector clusters is ~0.38
# entries per resident vector
DEFAULT_OVERFLOW_FRACTION = 0.375


@dataclass
class BuiltIndex:
    meta: MetaIndex
    assignment: PartitionAssignment
    clusters: List[Optional[SubCluster]]
    blobs: List[bytes]
    directory: ClusterDirectory

    @property
    def dim(self) -> int:
        return self.meta.dim

    @property
    def region_size(self) -> int:
        return self.directory.end

    def image(self) -> bytearray:
        return region_image(self.directory, self.blobs)


def records_from_arrays(vectors: np.ndarray, ids: Optional[Sequence[int]] = None) -> List[VectorRecord]:
    vectors = np.asarray(vectors, dtype=np.float32)
    if ids is None:
        ids = range(vectors.shape[0])
    return [VectorRecord(int(i), v) for i, v in zip(ids, vectors)]


def default_overflow_entries(clusters: Sequence[Optional[SubCluster]]) -> int:
    sizes = [len(c) if c is not None else 0 for c in clusters]
    pairs = [sizes[i] + (sizes[i + 1] if i + 1 < len(sizes) else 0) for i in range(0, len(sizes), 2)]
    return max(16, math.ceil(DEFAULT_OVERFLOW_FRACTION * max(pairs)))


def build_index(
    dataset: Sequence[VectorRecord],
    num_partitions: int,
    *,
    params: Optional[HnswParams] = None,
    ef_meta: Optional[int] = None,
    overflow_entries: Optional[int] = None,
    overflow_capacity: Optional[int] = None,
    seed: int = 0,
    version: int = 1,
) -> BuiltIndex:
    """Sample representatives, partition, build sub-graphs, serialize and lay out."""
    params = params or HnswParams(seed=seed)
    reps = sample_representatives(dataset, num_partitions, seed)
    meta = build_meta(reps, params, seed)
    assignment, subs = partition_dataset(meta, dataset, ef_meta, params)
    clusters: List[Optional[SubCluster]] = [None] * num_partitions
    for sub in subs:
        clusters[sub.cluster_id] = sub
    blobs = [encode_cluster(c) if c is not None else b"" for c in clusters]
    if overflow_capacity is None:
        entries = overflow_entries if overflow_entries is not None else default_overflow_entries(clusters)
        overflow_capacity = overflow_capacity_for(entries, meta.dim)
    directory = plan_layout([len(b) for b in blobs], overflow_capacity, dim=meta.dim, version=version)
    return BuiltIndex(meta, assignment, clusters, blobs, directory)


def region_image(directory: ClusterDirectory, blobs: Sequence[bytes]) -> bytearray:
    """Full region bytes: directory, zero epoch, clusters, empty overflow regions."""
    image = bytearray(directory.end)
    raw = directory.to_bytes()
    image[: len(raw)] = raw
    for entry, blob in zip(directory.entries, blobs):
        image[entry.cluster_offset : entry.cluster_offset + len(blob)] = blob
    return image


def relayout(built: BuiltIndex, overflow_capacity: int, version: int) -> BuiltIndex:
    """Same clusters under a new overflow size and directory version."""
    directory = plan_layout([len(b) for b in built.blobs], overflow_capacity, dim=built.dim, version=version)
    return BuiltIndex(built.meta, built.assignment, built.clusters, built.blobs, directory)


def upload(transport: Transport, built: BuiltIndex) -> None:
    """Write the whole region image with one write verb."""
    transport.write(0, bytes(built.image()), tag="upload")


# -- meta index file ----------------------------------------------------


def encode_meta(meta: MetaIndex) -> bytes:
    rep_ids = np.asarray([r.id for r in meta.representatives], dtype="<u8").tobytes()
    blob = encode_cluster(SubCluster(META_CLUSTER_ID, meta.graph))
    return META_MAGIC + struct.pack("<I", meta.num_partitions) + rep_ids + blob


def decode_meta(data: bytes) -> MetaIndex:
    if data[:4] != META_MAGIC:
        raise BadMagicError(f"bad meta index magic {data[:4]!r}")
    if len(data) < 8:
        raise TruncatedError("meta index truncated")
    (R,) = struct.unpack_from("<I", data, 4)
    rep_ids = np.frombuffer(data, dtype="<u8", count=R, offset=8).tolist()
    graph = decode_cluster(data[8 + 8 * R :]).graph
    reps = [VectorRecord(rid, graph.vector(p)) for p, rid in enumerate(rep_ids)]
    return MetaIndex(reps, graph)
