"""Benchmark harness: build, upload, sweep modes x ef_search, report."""

from __future__ import annotations

import csv
import json
import logging
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator, List, Optional

import numpy as np

from ..builder import BuiltIndex, build_index, encode_meta, records_from_arrays, upload
from ..compute_node import ComputeEngine, PhaseTimes, QueryBatch, QueryResult, cache_capacity
from ..config import Config
from ..errors import DatasetError
from ..hnsw import HnswParams
from ..memory_node import MemoryServer, register
from ..transport import FabricStats, Transport, connect
from .datasets import Dataset, ground_truth, load_fvecs, load_ivecs, recall_at_k, synthetic_dataset

log = logging.getLogger(__name__)

CSV_FIELDS = [
    "mode",
    "ef_search",
    "k",
    "b",
    "queries",
    "batches",
    "recall",
    "latency_mean_us",
    "latency_p50_us",
    "latency_p99_us",
    "round_trips",
    "round_trips_per_query",
    "bytes_per_query",
    "cluster_fetches",
    "network_us",
    "network_model_us",
    "sub_hnsw_us",
    "meta_hnsw_us",
]


@dataclass
class ReportRow:
    mode: str
    ef_search: int
    k: int
    b: int
    queries: int
    batches: int
    recall: float
    latency_mean_us: float
    latency_p50_us: float
    latency_p99_us: float
    round_trips: int
    round_trips_per_query: float
    bytes_per_query: float
    cluster_fetches: int
    network_us: float
    network_model_us: float
    sub_hnsw_us: float
    meta_hnsw_us: float
    results: Optional[List[List[int]]] = field(default=None, repr=False)


@dataclass
class RunReport:
    rows: List[ReportRow]
    dataset: str
    build_seconds: float
    region_bytes: int
    meta_bytes: int
    partitions: int

    def row(self, mode: str, ef_search: int) -> ReportRow:
        for r in self.rows:
            if r.mode == mode and r.ef_search == ef_search:
                return r
        raise KeyError((mode, ef_search))

    def to_records(self) -> List[dict]:
        out = []
        for r in self.rows:
            rec = asdict(r)
            rec.pop("results")
            rec.update(dataset=self.dataset, partitions=self.partitions)
            out.append(rec)
        return out

    def write_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
            w.writeheader()
            for rec in self.to_records():
                w.writerow(rec)

    def write_results(self, path: str) -> None:
        """Per-query result ids for every row, one JSON object per row."""
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.rows:
                fh.write(json.dumps({"mode": r.mode, "ef_search": r.ef_search, "k": r.k, "ids": r.results}) + "\n")


def load_dataset(cfg: Config) -> Dataset:
    if cfg.dataset == "synthetic":
        return synthetic_dataset(
            cfg.n,
            cfg.nq,
            cfg.dim,
            blobs=cfg.blobs,
            spread=cfg.spread,
            center_scale=cfg.center_scale,
            seed=cfg.seed,
            k=max(cfg.k, 1),
        )
    if not (cfg.base and cfg.query):
        raise DatasetError("file datasets need 'base' and 'query' paths")
    base = load_fvecs(cfg.base)
    queries = load_fvecs(cfg.query)
    gt = load_ivecs(cfg.groundtruth).astype(np.int64) if cfg.groundtruth else None
    if cfg.max_queries is not None:
        queries = queries[: cfg.max_queries]
        gt = gt[: cfg.max_queries] if gt is not None else None
    if gt is None:
        log.info("no ground truth file; computing it by exhaustive scan")
        gt = ground_truth(base, queries, cfg.k)
    return Dataset(base, queries, gt, name=cfg.dataset)


def build_for(cfg: Config, data: Dataset) -> BuiltIndex:
    params = HnswParams(M=cfg.M, ef_construction=cfg.ef_construction, seed=cfg.seed)
    return build_index(
        records_from_arrays(data.base),
        cfg.partitions,
        params=params,
        ef_meta=cfg.ef_meta,
        overflow_entries=cfg.overflow_entries,
        overflow_capacity=cfg.overflow_capacity,
        seed=cfg.seed,
    )


@contextmanager
def memory_pool(cfg: Config, built: BuiltIndex, spawn_server: bool = True) -> Iterator[Callable[[], Transport]]:
    """Bring up a memory node holding ``built``; yields a per-worker transport factory.

    The tcp backend spawns a local node on an ephemeral port unless
    ``spawn_server`` is false, in which case the image is uploaded to the
    node already listening at ``cfg.address``.
    """
    if cfg.backend == "inproc":
        region = register(built.region_size)
        upload(connect(cfg.transport(), region, record=False), built)
        yield lambda: connect(cfg.transport(), region, record=False)
        return
    if not spawn_server:
        t = connect(cfg.transport(), record=False)
        upload(t, built)
        t.close()
        yield lambda: connect(cfg.transport(), record=False)
        return
    region = register(built.region_size)
    server = MemoryServer(region, "127.0.0.1", 0)
    server.start()
    tcfg = replace(cfg.transport(), address=server.address)
    try:
        upload(connect(tcfg, record=False), built)
        yield lambda: connect(tcfg, record=False)
    finally:
        server.shutdown()
        server.server_close()


@dataclass
class _WorkerOutput:
    results: List[List[int]]
    batches: List[QueryResult]


def _run_worker(
    factory: Callable[[], Transport],
    built: BuiltIndex,
    cfg: Config,
    queries: np.ndarray,
    mode: str,
    ef_search: int,
) -> _WorkerOutput:
    transport = factory()
    try:
        engine = ComputeEngine(
            built.meta,
            transport,
            cache_clusters=cache_capacity(built.meta.num_partitions, cfg.cache_clusters, cfg.cache_fraction),
            ef_meta=cfg.ef_meta,
        )
        ids: List[List[int]] = []
        batches: List[QueryResult] = []
        for start in range(0, len(queries), cfg.batch_size):
            batch = QueryBatch(queries[start : start + cfg.batch_size], k=cfg.k, b=cfg.b, ef_search=ef_search)
            res = engine.execute(batch, mode)
            ids.extend(res.ids())
            batches.append(res)
        return _WorkerOutput(ids, batches)
    finally:
        transport.close()


def run_workload(
    factory: Callable[[], Transport], built: BuiltIndex, cfg: Config, queries: np.ndarray, mode: str, ef_search: int
) -> _WorkerOutput:
    """Split ``queries`` into contiguous chunks, one per worker, each with a cold cache."""
    workers = max(1, min(cfg.workers, len(queries)))
    chunks = np.array_split(np.arange(len(queries)), workers)
    if workers == 1:
        return _run_worker(factory, built, cfg, queries, mode, ef_search)
    outputs: List[Optional[_WorkerOutput]] = [None] * workers
    errors: List[BaseException] = []

    def target(w: int) -> None:
        try:
            outputs[w] = _run_worker(factory, built, cfg, queries[chunks[w]], mode, ef_search)
        except BaseException as exc:  # re-raised on the caller's thread
            errors.append(exc)

    threads = [threading.Thread(target=target, args=(w,)) for w in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    merged = _WorkerOutput([], [])
    for out in outputs:
        merged.results.extend(out.results)
        merged.batches.extend(out.batches)
    return merged


def summarize(mode: str, ef_search: int, cfg: Config, out: _WorkerOutput, truth: np.ndarray) -> ReportRow:
    s = len(out.results)
    stats = sum((b.stats for b in out.batches), FabricStats())
    phases = sum((b.phases for b in out.batches), PhaseTimes())
    per_query = np.array([b.phases.total_us / len(b.results) for b in out.batches])
    return ReportRow(
        mode=mode,
        ef_search=ef_search,
        k=cfg.k,
        b=cfg.b,
        queries=s,
        batches=len(out.batches),
        recall=recall_at_k(out.results, truth, cfg.k),
        latency_mean_us=phases.total_us / s,
        latency_p50_us=float(np.percentile(per_query, 50)),
        latency_p99_us=float(np.percentile(per_query, 99)),
        round_trips=stats.round_trips,
        round_trips_per_query=stats.round_trips / s,
        bytes_per_query=stats.bytes_read / s,
        cluster_fetches=sum(b.cluster_fetches for b in out.batches),
        network_us=phases.network_us / s,
        network_model_us=stats.simulated_time_us / s,
        sub_hnsw_us=phases.sub_hnsw_us / s,
        meta_hnsw_us=phases.meta_hnsw_us / s,
        results=out.results,
    )


def run_experiment(
    cfg: Config,
    data: Optional[Dataset] = None,
    built: Optional[BuiltIndex] = None,
    spawn_server: bool = True,
) -> RunReport:
    """Run every (mode, ef_search) pair of the sweep over the query set."""
    data = data if data is not None else load_dataset(cfg)
    truth = data.truth(cfg.k)
    t0 = time.perf_counter()
    if built is None:
        built = build_for(cfg, data)
    build_seconds = time.perf_counter() - t0
    log.info("index ready: %d partitions, %d region bytes", built.meta.num_partitions, built.region_size)
    rows: List[ReportRow] = []
    with memory_pool(cfg, built, spawn_server) as factory:
        for mode in cfg.modes:
            for ef in cfg.ef_sweep:
                out = run_workload(factory, built, cfg, data.queries, mode, ef)
                row = summarize(mode, ef, cfg, out, truth)
                log.info("%s ef=%d recall=%.4f rt/q=%.4f", mode, ef, row.recall, row.round_trips_per_query)
                rows.append(row)
    return RunReport(
        rows,
        dataset=data.name,
        build_seconds=build_seconds,
        region_bytes=built.region_size,
        meta_bytes=len(encode_meta(built.meta)),
        partitions=built.meta.num_partitions,
    )
