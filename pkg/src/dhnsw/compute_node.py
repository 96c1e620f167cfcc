"""Compute-side query engine.

Holds the meta index locally, plans each query batch so that every
required cluster crosses the fabric at most once, fetches clusters (one
contiguous extent each, overflow included), searches them, and merges
per-query candidates. Three execution modes share all search code and
differ only in how bytes are fetched:

``full``        per-batch directory check, dedup, cache, doorbell groups of D
``nodoorbell``  dedup and cache, one plain read per cluster
``naive``       one plain read per (query, cluster); no dedup, no cache
"""

from __future__ import annotations

import logging
import struct
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    CapacityError,
    CodecError,
    DimensionMismatchError,
    DuplicateIdError,
    StaleDirectoryError,
)
from .hnsw import HnswGraph, Neighbor, VectorRecord, as_query, sq_l2_rows
from .layout import (
    HEAD,
    ClusterDirectory,
    contiguous_read_extent,
    decode_cluster,
    directory_size,
    align8,
    overflow_entry_offset,
    overflow_max_entries,
    pack_overflow_entry,
    parse_overflow_arrays,
    read_directory_header,
    split_extent,
)
from .partition import MetaIndex, classify, classify_topb
from .transport import FabricStats, Transport

log = logging.getLogger(__name__)

MODES = ("naive", "nodoorbell", "full")


@dataclass
class QueryBatch:
    queries: np.ndarray
    k: int = 10
    b: int = 2
    ef_search: int = 48

    def __post_init__(self) -> None:
        q = np.asarray(self.queries, dtype=np.float32)
        if q.ndim == 1:
            q = q[None, :]
        if q.ndim != 2 or q.shape[0] < 1:
            raise ValueError("a batch needs at least one query")
        if self.k < 1 or self.b < 1 or self.ef_search < 1:
            raise ValueError("k, b and ef_search must be positive")
        self.queries = q

    def __len__(self) -> int:
        return self.queries.shape[0]


@dataclass
class BatchPlan:
    required: List[List[int]]
    order: List[int]
    fetch_list: List[int]
    doorbell_groups: List[List[int]]
    cache_hits: List[int]

    def needers(self) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = {}
        for qi, parts in enumerate(self.required):
            for p in parts:
                out.setdefault(p, []).append(qi)
        return out


class LoadedCluster:
    """A decoded cluster plus the overflow entries read alongside it."""

    def __init__(
        self,
        cluster_id: int,
        graph: Optional[HnswGraph],
        overflow_ids: np.ndarray,
        overflow_vectors: np.ndarray,
    ) -> None:
        self.cluster_id = cluster_id
        self.graph = graph
        self.overflow_ids = overflow_ids
        self.overflow_vectors = overflow_vectors

    def ids(self) -> List[int]:
        base = self.graph.ids if self.graph is not None else []
        return base + [int(i) for i in self.overflow_ids]

    def with_overflow(self, vector_id: int, values: np.ndarray) -> "LoadedCluster":
        return LoadedCluster(
            self.cluster_id,
            self.graph,
            np.append(self.overflow_ids, np.uint64(vector_id)),
            np.vstack([self.overflow_vectors, np.asarray(values, dtype=np.float32)[None, :]]),
        )

    def search(self, query: np.ndarray, k: int, ef_search: int) -> List[Neighbor]:
        found: List[Neighbor] = []
        if self.graph is not None and len(self.graph):
            found = self.graph.search(query, k=k, ef_search=ef_search)
        if len(self.overflow_ids):
            d = sq_l2_rows(self.overflow_vectors, as_query(query, self.overflow_vectors.shape[1])).tolist()
            found.extend(zip((int(i) for i in self.overflow_ids), d))
        return found


class ClusterCache:
    """Keeps the ``capacity`` most recently loaded clusters; hits do not refresh."""

    def __init__(self, capacity: int) -> None:
        if capacity < 0:
            raise ValueError("cache capacity must be non-negative")
        self.capacity = capacity
        self._resident: "OrderedDict[int, LoadedCluster]" = OrderedDict()

    def __contains__(self, cluster_id: int) -> bool:
        return cluster_id in self._resident

    def __len__(self) -> int:
        return len(self._resident)

    def resident(self) -> List[int]:
        """Resident cluster ids, oldest load first."""
        return list(self._resident)

    def get(self, cluster_id: int) -> LoadedCluster:
        return self._resident[cluster_id]

    def put(self, cluster: LoadedCluster) -> None:
        self._resident.pop(cluster.cluster_id, None)
        self._resident[cluster.cluster_id] = cluster
        while len(self._resident) > self.capacity:
            self._resident.popitem(last=False)

    def replace(self, cluster: LoadedCluster) -> None:
        """Swap in an updated copy without changing its load position."""
        if cluster.cluster_id in self._resident:
            self._resident[cluster.cluster_id] = cluster

    def clear(self) -> None:
        self._resident.clear()


def cache_capacity(num_partitions: int, cache_clusters: Optional[int] = None, cache_fraction: Optional[float] = None) -> int:
    if cache_clusters is not None:
        return cache_clusters
    if cache_fraction is not None:
        return max(1, int(cache_fraction * num_partitions))
    return num_partitions


@dataclass
class PhaseTimes:
    network_us: float = 0.0
    sub_hnsw_us: float = 0.0
    meta_hnsw_us: float = 0.0
    total_us: float = 0.0

    def __add__(self, other: "PhaseTimes") -> "PhaseTimes":
        return PhaseTimes(
            self.network_us + other.network_us,
            self.sub_hnsw_us + other.sub_hnsw_us,
            self.meta_hnsw_us + other.meta_hnsw_us,
            self.total_us + other.total_us,
        )


@dataclass
class QueryResult:
    results: List[List[Neighbor]]
    stats: FabricStats
    phases: PhaseTimes
    mode: str
    plan: Optional[BatchPlan] = None
    cluster_fetches: int = 0
    retried: bool = False

    def ids(self) -> List[List[int]]:
        return [[i for i, _ in row] for row in self.results]


def required_partitions(meta: MetaIndex, batch: QueryBatch, ef_meta: Optional[int] = None) -> List[List[int]]:
    if batch.b > meta.num_partitions:
        raise ValueError(f"b={batch.b} exceeds the {meta.num_partitions} partitions")
    return [classify_topb(meta, q, batch.b, ef_meta) for q in batch.queries]


def plan_from_required(required: List[List[int]], cache: ClusterCache, doorbell_max: int) -> BatchPlan:
    """Dedup in first-needed order and decide hits by replaying cache loads.

    A resident cluster only counts as a hit if it is still resident when
    its turn comes; fetches earlier in the order can evict it first.
    """
    order: List[int] = []
    seen = set()
    for parts in required:
        for p in parts:
            if p not in seen:
                seen.add(p)
                order.append(p)
    sim = OrderedDict((c, None) for c in cache.resident())
    hits: List[int] = []
    fetch: List[int] = []
    for p in order:
        if p in sim:
            hits.append(p)
            continue
        fetch.append(p)
        sim[p] = None
        while len(sim) > cache.capacity:
            sim.popitem(last=False)
    groups = [fetch[i : i + doorbell_max] for i in range(0, len(fetch), doorbell_max)]
    return BatchPlan(required, order, fetch, groups, hits)


def plan_batch(
    meta: MetaIndex, cache: ClusterCache, batch: QueryBatch, doorbell_max: int = 8, ef_meta: Optional[int] = None
) -> BatchPlan:
    return plan_from_required(required_partitions(meta, batch, ef_meta), cache, doorbell_max)


def merge_topk(candidates: Iterable[Neighbor], k: int) -> List[Neighbor]:
    best: Dict[int, float] = {}
    for vid, d in candidates:
        if vid not in best or d < best[vid]:
            best[vid] = d
    ranked = sorted(best.items(), key=lambda item: (item[1], item[0]))
    return ranked[:k]


class _StaleRead(Exception):
    pass


class ComputeEngine:
    """One compute worker: meta index, directory snapshot, cluster cache, transport."""

    def __init__(
        self,
        meta: MetaIndex,
        transport: Transport,
        *,
        cache_clusters: Optional[int] = None,
        ef_meta: Optional[int] = None,
    ) -> None:
        self.meta = meta
        self.transport = transport
        self.cache = ClusterCache(cache_capacity(meta.num_partitions, cache_clusters))
        self.ef_meta = ef_meta
        self.directory: Optional[ClusterDirectory] = None
        self.epoch: Optional[int] = None
        self._inserted: set = set()
        self.refresh_directory()

    @property
    def dim(self) -> int:
        return self.meta.dim

    # -- directory ------------------------------------------------------

    def refresh_directory(self) -> int:
        """Re-read the directory header, entries and insert epoch.

        One round trip when the remote cluster count matches the meta index
        (the first read is sized from it). A newer version or a moved epoch
        drops every cached cluster.
        """
        t = self.transport
        expected = self.meta.num_partitions if self.directory is None else self.directory.num_clusters
        data = t.read(0, align8(directory_size(expected)) + 8, tag="directory")
        n = read_directory_header(data)[3]
        if n != expected:
            data = t.read(0, align8(directory_size(n)) + 8, tag="directory")
        remote = ClusterDirectory.from_bytes(data)
        (epoch,) = struct.unpack_from("<I", data, remote.epoch_offset)
        if self.directory is None or remote.version > self.directory.version:
            if self.directory is not None:
                log.info("directory version %d -> %d", self.directory.version, remote.version)
            self.directory = remote
            self.cache.clear()
        if epoch != self.epoch:
            self.cache.clear()
            self.epoch = epoch
        return self.directory.version

    def _check_epoch(self) -> None:
        (epoch,) = struct.unpack("<I", self.transport.read(self.directory.epoch_offset, 4, tag="epoch"))
        if epoch != self.epoch:
            self.cache.clear()
            self.epoch = epoch

    # -- fetching -------------------------------------------------------

    def _load(self, cluster_id: int, extent: bytes) -> LoadedCluster:
        entry = self.directory.entry(cluster_id)
        blob, overflow = split_extent(entry, extent)
        graph = None
        if entry.cluster_len:
            try:
                sub = decode_cluster(blob)
            except CodecError as exc:
                raise _StaleRead(str(exc)) from exc
            if sub.cluster_id != cluster_id:
                raise _StaleRead(f"expected cluster {cluster_id}, found {sub.cluster_id}")
            graph = sub.graph
        try:
            (lo_ids, lo_vecs), (hi_ids, hi_vecs) = parse_overflow_arrays(overflow, self.dim)
        except CodecError as exc:
            raise _StaleRead(str(exc)) from exc
        if entry.slot == HEAD:
            return LoadedCluster(cluster_id, graph, lo_ids, lo_vecs)
        return LoadedCluster(cluster_id, graph, hi_ids, hi_vecs)

    def _fetch_one(self, cluster_id: int) -> bytes:
        offset, length = contiguous_read_extent(self.directory, cluster_id)
        return self.transport.read(offset, length, tag="cluster")

    def _fetch_group(self, cluster_ids: Sequence[int]) -> List[bytes]:
        specs = [contiguous_read_extent(self.directory, c) for c in cluster_ids]
        return self.transport.doorbell_read(specs, self.transport.doorbell_max, tag="cluster")

    # -- execution ------------------------------------------------------

    def execute_batch(self, batch: QueryBatch) -> QueryResult:
        return self._execute(batch, "full")

    def execute_nodoorbell(self, batch: QueryBatch) -> QueryResult:
        return self._execute(batch, "nodoorbell")

    def execute_naive(self, batch: QueryBatch) -> QueryResult:
        return self._execute(batch, "naive")

    def execute(self, batch: QueryBatch, mode: str = "full") -> QueryResult:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        return self._execute(batch, mode)

    def _execute(self, batch: QueryBatch, mode: str) -> QueryResult:
        if batch.queries.shape[1] != self.dim:
            raise DimensionMismatchError(f"queries have dim {batch.queries.shape[1]}, index has dim {self.dim}")
        t0 = time.perf_counter()
        before = self.transport.stats.copy()
        phases = PhaseTimes()
        retried = False
        try:
            results, plan, fetches = self._run(batch, mode, phases)
        except _StaleRead as exc:
            version = self.directory.version
            self.refresh_directory()
            if self.directory.version == version:
                raise StaleDirectoryError(f"cluster read failed with current directory: {exc}") from exc
            self.cache.clear()
            retried = True
            results, plan, fetches = self._run(batch, mode, phases)
        delta = self.transport.stats - before
        phases.network_us = delta.wall_time_us
        phases.total_us = (time.perf_counter() - t0) * 1e6
        return QueryResult(results, delta, phases, mode, plan, fetches, retried)

    def _run(
        self, batch: QueryBatch, mode: str, phases: PhaseTimes
    ) -> Tuple[List[List[Neighbor]], Optional[BatchPlan], int]:
        if mode == "full":
            self.refresh_directory()
        t = time.perf_counter()
        required = required_partitions(self.meta, batch, self.ef_meta)
        phases.meta_hnsw_us += (time.perf_counter() - t) * 1e6

        partial: List[List[Neighbor]] = [[] for _ in range(len(batch))]
        queries = batch.queries

        def visit(cluster: LoadedCluster, query_ids: Iterable[int]) -> None:
            s = time.perf_counter()
            for qi in query_ids:
                partial[qi].extend(cluster.search(queries[qi], batch.k, batch.ef_search))
            phases.sub_hnsw_us += (time.perf_counter() - s) * 1e6

        def load(cluster_id: int, extent: bytes) -> LoadedCluster:
            s = time.perf_counter()
            cluster = self._load(cluster_id, extent)
            phases.sub_hnsw_us += (time.perf_counter() - s) * 1e6
            return cluster

        plan: Optional[BatchPlan] = None
        fetches = 0
        if mode == "naive":
            for qi, parts in enumerate(required):
                for p in parts:
                    visit(load(p, self._fetch_one(p)), [qi])
                    fetches += 1
        else:
            D = self.transport.doorbell_max if mode == "full" else 1
            plan = plan_from_required(required, self.cache, D)
            if mode == "nodoorbell" and plan.cache_hits:
                self._check_epoch()
                plan = plan_from_required(required, self.cache, D)
            needers = plan.needers()
            hits = [self.cache.get(c) for c in plan.cache_hits]
            for cluster in hits:
                visit(cluster, needers[cluster.cluster_id])
            for group in plan.doorbell_groups:
                if mode == "full":
                    extents = self._fetch_group(group)
                else:
                    extents = [self._fetch_one(c) for c in group]
                for c, extent in zip(group, extents):
                    cluster = load(c, extent)
                    visit(cluster, needers[c])
                    self.cache.put(cluster)
                    fetches += 1

        s = time.perf_counter()
        results = [merge_topk(cands, batch.k) for cands in partial]
        phases.sub_hnsw_us += (time.perf_counter() - s) * 1e6
        return results, plan, fetches

    # -- insertion ------------------------------------------------------

    def insert_vector(self, record: VectorRecord) -> int:
        """Append ``record`` to its partition's overflow slot; returns the partition.

        The slot index is reserved with fetch-add on the slot's own counter;
        the opposite counter is then read atomically so two slots filling
        the shared region from both ends can never hand out the same bytes.
        """
        if record.dim != self.dim:
            raise DimensionMismatchError(f"record has dim {record.dim}, index has dim {self.dim}")
        if record.id in self._inserted or any(
            record.id in self.cache.get(c).ids() for c in self.cache.resident()
        ):
            raise DuplicateIdError(f"vector id {record.id} already present")
        t = self.transport
        cid = classify(self.meta, record.values, self.ef_meta)
        entry = self.directory.entry(cid)
        own = entry.overflow_offset + (0 if entry.slot == HEAD else 4)
        other = entry.overflow_offset + (4 if entry.slot == HEAD else 0)
        index = t.fetch_add(own, 1, tag="overflow")
        opposite = t.fetch_add(other, 0, tag="overflow")
        if index + 1 + opposite > overflow_max_entries(entry.overflow_capacity, self.dim):
            t.fetch_add(own, -1, tag="overflow")
            raise CapacityError(f"overflow region of group {entry.group_index} is full; cluster {cid} needs rebuild")
        offset = entry.overflow_offset + overflow_entry_offset(entry.overflow_capacity, entry.slot, index, self.dim)
        t.write(offset, pack_overflow_entry(record.id, record.values), tag="overflow")
        prev = t.fetch_add(self.directory.epoch_offset, 1, tag="epoch")
        self._inserted.add(record.id)
        if prev == self.epoch:
            self.epoch = prev + 1
            if cid in self.cache:
                self.cache.replace(self.cache.get(cid).with_overflow(record.id, record.values))
        else:
            self.cache.clear()
            self.epoch = None
        return cid

    def stats(self) -> FabricStats:
        return self.transport.stats.copy()
