"""Representative (meta) index and dataset partitioning.

A small three-layer HNSW over uniformly sampled representatives acts as a
cluster classifier: each representative's bottom-layer node defines one
partition, and every dataset vector joins the partition its descent ends
in. Node ids inside the meta graph are partition indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatchError, EmptyIndexError
from .hnsw import HnswGraph, HnswParams, VectorRecord, build

META_LEVEL_CAP = 2


def default_ef_meta(b: int = 1) -> int:
    return max(2 * b, 16)


@dataclass
class MetaIndex:
    representatives: List[VectorRecord]
    graph: HnswGraph

    @property
    def num_partitions(self) -> int:
        return len(self.representatives)

    @property
    def entry(self) -> int:
        return self.graph.entry_point

    @property
    def dim(self) -> int:
        return self.graph.dim


@dataclass
class PartitionAssignment:
    cluster_of: Dict[int, int] = field(default_factory=dict)

    def members(self, num_partitions: int) -> List[List[int]]:
        out: List[List[int]] = [[] for _ in range(num_partitions)]
        for vid, c in self.cluster_of.items():
            out[c].append(vid)
        return out


@dataclass
class SubCluster:
    cluster_id: int
    graph: HnswGraph

    def __len__(self) -> int:
        return len(self.graph)


def sample_representatives(dataset: Sequence[VectorRecord], R: int, seed: int = 0) -> List[VectorRecord]:
    n = len(dataset)
    if R < 1:
        raise ValueError("R must be at least 1")
    if R > n:
        raise ValueError(f"cannot sample {R} representatives from {n} vectors")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(n, size=R, replace=False))
    return [dataset[int(i)] for i in picks]


def build_meta(
    representatives: Sequence[VectorRecord], params: Optional[HnswParams] = None, seed: int = 0
) -> MetaIndex:
    if not representatives:
        raise EmptyIndexError("meta index needs at least one representative")
    base = params or HnswParams()
    meta_params = HnswParams(M=base.M, ef_construction=base.ef_construction, level_cap=META_LEVEL_CAP, seed=seed)
    nodes = [VectorRecord(p, r.values) for p, r in enumerate(representatives)]
    return MetaIndex(list(representatives), build(nodes, meta_params))


def classify(meta: MetaIndex, vector: Sequence[float], ef_meta: Optional[int] = None) -> int:
    """Partition index reached by descending the meta graph."""
    ef = default_ef_meta() if ef_meta is None else ef_meta
    return meta.graph.search(vector, k=1, ef_search=ef)[0][0]


def classify_topb(meta: MetaIndex, vector: Sequence[float], b: int, ef_meta: Optional[int] = None) -> List[int]:
    if b < 1 or b > meta.num_partitions:
        raise ValueError(f"b={b} must lie in [1, {meta.num_partitions}]")
    ef = default_ef_meta(b) if ef_meta is None else max(ef_meta, b)
    return [p for p, _ in meta.graph.search(vector, k=b, ef_search=ef)]


def partition_dataset(
    meta: MetaIndex,
    dataset: Sequence[VectorRecord],
    ef_meta: Optional[int] = None,
    params: Optional[HnswParams] = None,
) -> Tuple[PartitionAssignment, List[SubCluster]]:
    """Assign every vector to a partition and build one sub-HNSW per non-empty partition.

    Sub-graph seeds are derived from ``params.seed`` and the partition index.
    """
    params = params or HnswParams()
    assignment = PartitionAssignment()
    buckets: List[List[VectorRecord]] = [[] for _ in range(meta.num_partitions)]
    for rec in dataset:
        if rec.dim != meta.dim:
            raise DimensionMismatchError(f"record {rec.id} has dim {rec.dim}, meta index has dim {meta.dim}")
        c = classify(meta, rec.values, ef_meta)
        assignment.cluster_of[rec.id] = c
        buckets[c].append(rec)

    subs: List[SubCluster] = []
    for c, members in enumerate(buckets):
        if not members:
            continue
        rep_id = meta.representatives[c].id
        entry = rep_id if any(m.id == rep_id for m in members) else members[0].id
        sub_params = HnswParams(
            M=params.M,
            ef_construction=params.ef_construction,
            level_cap=params.level_cap,
            seed=params.seed * 1_000_003 + c,
        )
        subs.append(SubCluster(c, build(members, sub_params, entry_id=entry)))
    return assignment, subs
