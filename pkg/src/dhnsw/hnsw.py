"""Hierarchical navigable small world (HNSW) graph index.

A single-writer, multi-reader proximity graph over float32 vectors with
squared-L2 distance. Every ordering decision breaks ties by the smaller
vector id, so construction and search are fully deterministic for a
fixed seed and input order.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatchError, DuplicateIdError, EmptyIndexError

Neighbor = Tuple[int, float]


@dataclass(frozen=True)
class VectorRecord:
    id: int
    values: np.ndarray

    def __post_init__(self) -> None:
        if not 0 <= int(self.id) < 2**64:
            raise ValueError(f"vector id {self.id} does not fit in 64 bits")
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class HnswParams:
    """Construction parameters.

    ``level_cap`` truncates the geometric level draw; ``None`` leaves it
    unbounded.
    """

    M: int = 16
    ef_construction: int = 200
    level_cap: Optional[int] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.M < 2:
            raise ValueError("M must be at least 2")
        if self.ef_construction < 1:
            raise ValueError("ef_construction must be positive")
        if self.level_cap is not None and self.level_cap < 0:
            raise ValueError("level_cap must be non-negative")


@dataclass(frozen=True)
class SearchParams:
    k: int = 10
    ef_search: int = 48

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.ef_search < self.k:
            object.__setattr__(self, "ef_search", self.k)


def sq_l2_rows(rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Squared L2 distance from each row of ``rows`` to ``query`` (float64)."""
    diff = rows.astype(np.float64, copy=False) - query
    return np.einsum("ij,ij->i", diff, diff)


def distance(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(sq_l2_rows(a[None, :], b)[0])


def as_query(query: Sequence[float], dim: int) -> np.ndarray:
    # round through float32 so a query equal to a stored vector scores exactly 0
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if q.shape[0] != dim:
        raise DimensionMismatchError(f"query has dim {q.shape[0]}, index has dim {dim}")
    return q.astype(np.float64)


class HnswGraph:
    """Multi-layer proximity graph.

    Nodes are addressed externally by their 64-bit vector id and
    internally by a dense local index in insertion order.
    """

    def __init__(self, dim: int, params: Optional[HnswParams] = None) -> None:
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = int(dim)
        self.params = params or HnswParams()
        self._rng = random.Random(self.params.seed)
        self._ml = 1.0 / math.log(self.params.M)
        self._data = np.zeros((16, self.dim), dtype=np.float32)
        self._ids: List[int] = []
        self._local: dict = {}
        self._levels: List[int] = []
        self._links: List[List[List[int]]] = []
        self._entry = -1
        self.max_level = -1

    # -- introspection -------------------------------------------------

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, vector_id: int) -> bool:
        return int(vector_id) in self._local

    @property
    def entry_point(self) -> Optional[int]:
        return None if self._entry < 0 else self._ids[self._entry]

    @property
    def ids(self) -> List[int]:
        return list(self._ids)

    @property
    def vectors(self) -> np.ndarray:
        return self._data[: len(self._ids)]

    def level_of(self, vector_id: int) -> int:
        return self._levels[self._local[int(vector_id)]]

    def vector(self, vector_id: int) -> np.ndarray:
        return self._data[self._local[int(vector_id)]].copy()

    def neighbors(self, vector_id: int, layer: int) -> List[int]:
        links = self._links[self._local[int(vector_id)]]
        if layer >= len(links):
            return []
        return [self._ids[j] for j in links[layer]]

    def layer_population(self, layer: int) -> int:
        return sum(1 for lv in self._levels if lv >= layer)

    def max_degree(self, layer: int) -> int:
        return 2 * self.params.M if layer == 0 else self.params.M

    def local_structure(self) -> Tuple[int, List[int], List[List[List[int]]]]:
        """(entry local index, levels, adjacency in local indices); used by the codec."""
        return self._entry, list(self._levels), [[list(l) for l in node] for node in self._links]

    @classmethod
    def from_parts(
        cls,
        dim: int,
        ids: Sequence[int],
        levels: Sequence[int],
        links: List[List[List[int]]],
        vectors: np.ndarray,
        entry_local: int,
        params: Optional[HnswParams] = None,
    ) -> "HnswGraph":
        g = cls(dim, params)
        n = len(ids)
        g._data = np.array(vectors, dtype=np.float32).reshape(n, dim) if n else g._data
        g._ids = [int(i) for i in ids]
        g._local = {vid: j for j, vid in enumerate(g._ids)}
        g._levels = [int(lv) for lv in levels]
        g._links = links
        g._entry = entry_local if n else -1
        g.max_level = g._levels[entry_local] if n else -1
        return g

    # -- construction --------------------------------------------------

    def draw_level(self) -> int:
        level = int(-math.log(1.0 - self._rng.random()) * self._ml)
        if self.params.level_cap is not None:
            level = min(level, self.params.level_cap)
        return level

    def _append_node(self, vector_id: int, values: np.ndarray, level: int) -> int:
        n = len(self._ids)
        if n == self._data.shape[0]:
            grown = np.zeros((2 * n, self.dim), dtype=np.float32)
            grown[:n] = self._data
            self._data = grown
        self._data[n] = values
        self._ids.append(vector_id)
        self._local[vector_id] = n
        self._levels.append(level)
        self._links.append([[] for _ in range(level + 1)])
        return n

    def insert(self, record: VectorRecord, level: Optional[int] = None) -> None:
        if record.dim != self.dim:
            raise DimensionMismatchError(f"record has dim {record.dim}, index has dim {self.dim}")
        if record.id in self._local:
            raise DuplicateIdError(f"vector id {record.id} already present")
        if level is None:
            level = self.draw_level()
        node = self._append_node(record.id, record.values, level)
        if self._entry < 0:
            self._entry = node
            self.max_level = level
            return

        q = self._data[node].astype(np.float64)
        ep = self._entry
        eps = [(float(sq_l2_rows(self._data[ep : ep + 1], q)[0]), self._ids[ep], ep)]
        for layer in range(self.max_level, level, -1):
            eps = self._search_layer(q, eps, 1, layer)
        M = self.params.M
        for layer in range(min(level, self.max_level), -1, -1):
            found = self._search_layer(q, eps, self.params.ef_construction, layer)
            chosen = [j for _, _, j in found[:M]]
            self._links[node][layer] = chosen
            cap = self.max_degree(layer)
            for j in chosen:
                adj = self._links[j][layer]
                adj.append(node)
                if len(adj) > cap:
                    self._links[j][layer] = self._closest(self._data[j].astype(np.float64), adj, cap)
            eps = found
        if level > self.max_level:
            self._entry = node
            self.max_level = level

    def _closest(self, q: np.ndarray, candidates: List[int], keep: int) -> List[int]:
        d = sq_l2_rows(self._data[candidates], q).tolist()
        ids = self._ids
        ranked = sorted(zip(d, (ids[c] for c in candidates), candidates))
        return [c for _, _, c in ranked[:keep]]

    # -- search --------------------------------------------------------

    def _search_layer(
        self, q: np.ndarray, entries: List[Tuple[float, int, int]], ef: int, layer: int
    ) -> List[Tuple[float, int, int]]:
        """Best-first search of one layer; returns (dist, id, local) ascending."""
        ids = self._ids
        links = self._links
        data = self._data
        visited = {e[2] for e in entries}
        cand = list(entries)
        heapq.heapify(cand)
        best = [(-d, -i, j) for d, i, j in entries]
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)
        while cand:
            d, i, j = heapq.heappop(cand)
            worst = best[0]
            if len(best) >= ef and (d > -worst[0] or (d == -worst[0] and i > -worst[1])):
                break
            fresh = [x for x in links[j][layer] if x not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            dists = sq_l2_rows(data[fresh], q).tolist()
            for x, dx in zip(fresh, dists):
                ix = ids[x]
                if len(best) < ef:
                    heapq.heappush(cand, (dx, ix, x))
                    heapq.heappush(best, (-dx, -ix, x))
                    continue
                wd, wi = -best[0][0], -best[0][1]
                if dx < wd or (dx == wd and ix < wi):
                    heapq.heappush(cand, (dx, ix, x))
                    heapq.heapreplace(best, (-dx, -ix, x))
        return sorted((-nd, -ni, j) for nd, ni, j in best)

    def search(self, query: Sequence[float], k: int = 10, ef_search: Optional[int] = None) -> List[Neighbor]:
        """Top-k (id, squared distance) pairs, ascending, ties by smaller id."""
        sp = SearchParams(k=k, ef_search=ef_search if ef_search is not None else k)
        if self._entry < 0:
            raise EmptyIndexError("search on an empty graph")
        q = as_query(query, self.dim)
        ep = self._entry
        eps = [(float(sq_l2_rows(self._data[ep : ep + 1], q)[0]), self._ids[ep], ep)]
        for layer in range(self.max_level, 0, -1):
            eps = self._search_layer(q, eps, 1, layer)
        found = self._search_layer(q, eps, sp.ef_search, 0)
        return [(i, d) for d, i, _ in found[: sp.k]]


def build(
    records: Iterable[VectorRecord],
    params: Optional[HnswParams] = None,
    entry_id: Optional[int] = None,
) -> HnswGraph:
    """Build a graph by sequential insertion.

    With ``entry_id`` set, that record is inserted first and promoted to the
    highest drawn level so it stays the entry point of the finished graph.
    """
    records = list(records)
    if not records:
        raise EmptyIndexError("cannot build an index from zero records")
    dim = records[0].dim
    for r in records:
        if r.dim != dim:
            raise DimensionMismatchError(f"record {r.id} has dim {r.dim}, expected {dim}")
    graph = HnswGraph(dim, params)
    if entry_id is None:
        for r in records:
            graph.insert(r)
        return graph
    pos = next((p for p, r in enumerate(records) if r.id == entry_id), None)
    if pos is None:
        raise KeyError(f"entry id {entry_id} is not among the records")
    records.insert(0, records.pop(pos))
    levels = [graph.draw_level() for _ in records]
    levels[0] = max(levels)
    for r, lv in zip(records, levels):
        graph.insert(r, level=lv)
    return graph


def build_from_arrays(
    ids: Sequence[int], vectors: np.ndarray, params: Optional[HnswParams] = None, entry_id: Optional[int] = None
) -> HnswGraph:
    vectors = np.asarray(vectors, dtype=np.float32)
    return build((VectorRecord(int(i), v) for i, v in zip(ids, vectors)), params, entry_id)


def insert(graph: HnswGraph, record: VectorRecord) -> None:
    graph.insert(record)


def search_knn(graph: HnswGraph, query: Sequence[float], params: SearchParams) -> List[Neighbor]:
    return graph.search(query, k=params.k, ef_search=params.ef_search)
