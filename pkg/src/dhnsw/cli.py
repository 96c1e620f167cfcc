"""Command line entry point.

Exit codes: 0 success, 2 usage or config error, 3 dataset error,
4 connection or transport error, 5 overflow capacity error, 6 codec or
layout error, 1 any other failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bench.datasets import load_fvecs, synthetic_dataset
from .bench.runner import build_for, load_dataset, run_experiment
from .builder import decode_meta, encode_meta
from .compute_node import ComputeEngine, QueryBatch, cache_capacity
from .config import Config, dump_config, load_config
from .errors import (
    CapacityError,
    CodecError,
    ConfigError,
    DatasetError,
    DhnswError,
    TransportError,
)
from .hnsw import VectorRecord
from .layout import ClusterDirectory, contiguous_read_extent, read_directory_header, directory_size, align8
from .memory_node import MemoryServer, Region, register, serve_read, serve_write
from .transport import Transport, connect

log = logging.getLogger("dhnsw")

EXIT_USAGE, EXIT_DATASET, EXIT_TRANSPORT, EXIT_CAPACITY, EXIT_CODEC = 2, 3, 4, 5, 6

META_FILE = "meta.bin"
IMAGE_FILE = "region.bin"
CONFIG_FILE = "config.txt"


def _config(args: argparse.Namespace) -> Config:
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    if getattr(args, "address", None):
        overrides["address"] = args.address
    if getattr(args, "backend", None):
        overrides["backend"] = args.backend
    cfg_path = args.config
    if cfg_path is None and getattr(args, "index", None):
        candidate = os.path.join(args.index, CONFIG_FILE)
        cfg_path = candidate if os.path.exists(candidate) else None
    return load_config(cfg_path, overrides)


def _region_from_image(path: str) -> Region:
    with open(path, "rb") as fh:
        image = fh.read()
    region = register(len(image))
    serve_write(region, 0, image)
    return region


def _open_transport(cfg: Config, index_dir: Optional[str]) -> "tuple[Transport, Optional[Region]]":
    if cfg.backend == "tcp":
        return connect(cfg.transport()), None
    if not index_dir:
        raise ConfigError("the inproc backend needs --index pointing at a built index")
    region = _region_from_image(os.path.join(index_dir, IMAGE_FILE))
    return connect(cfg.transport(), region), region


def _load_meta(index_dir: str):
    with open(os.path.join(index_dir, META_FILE), "rb") as fh:
        return decode_meta(fh.read())


# -- subcommands --------------------------------------------------------


def cmd_build(args: argparse.Namespace) -> int:
    cfg = _config(args)
    data = load_dataset(cfg)
    built = build_for(cfg, data)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, META_FILE), "wb") as fh:
        fh.write(encode_meta(built.meta))
    with open(os.path.join(args.out, IMAGE_FILE), "wb") as fh:
        fh.write(built.image())
    with open(os.path.join(args.out, CONFIG_FILE), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    print(f"built {built.meta.num_partitions} partitions over {len(data.base)} vectors; region {built.region_size} bytes")
    if args.upload:
        t = connect(cfg.transport())
        t.write(0, bytes(built.image()), tag="upload")
        t.close()
        print(f"uploaded to {cfg.address}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    if args.image:
        region = _region_from_image(args.image)
    elif args.capacity:
        region = register(args.capacity)
    else:
        raise ConfigError("serve needs --image or --capacity")
    server = MemoryServer(region, args.host, args.port)
    print(f"memory node listening on {server.address} ({region.capacity} bytes)", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _queries(args: argparse.Namespace, cfg: Config) -> np.ndarray:
    if args.queries:
        return load_fvecs(args.queries)
    return synthetic_dataset(cfg.n, cfg.nq, cfg.dim, blobs=cfg.blobs, spread=cfg.spread,
                             center_scale=cfg.center_scale, seed=cfg.seed, k=None).queries


def cmd_query(args: argparse.Namespace) -> int:
    cfg = _config(args)
    meta = _load_meta(args.index)
    transport, _ = _open_transport(cfg, args.index)
    queries = _queries(args, cfg)[: cfg.batch_size]
    engine = ComputeEngine(
        meta,
        transport,
        cache_clusters=cache_capacity(meta.num_partitions, cfg.cache_clusters, cfg.cache_fraction),
        ef_meta=cfg.ef_meta,
    )
    res = engine.execute(QueryBatch(queries, k=cfg.k, b=cfg.b, ef_search=cfg.ef_search), args.mode)
    out = sys.stdout
    out.write("query\trank\tid\tdistance\n")
    for qi, row in enumerate(res.results):
        for rank, (vid, d) in enumerate(row):
            out.write(f"{qi}\t{rank}\t{vid}\t{d:.6g}\n")
    s = res.stats
    print(
        f"# mode={res.mode} queries={len(queries)} round_trips={s.round_trips} "
        f"bytes_read={s.bytes_read} cluster_fetches={res.cluster_fetches}",
        file=sys.stderr,
    )
    return 0


def cmd_insert(args: argparse.Namespace) -> int:
    cfg = _config(args)
    meta = _load_meta(args.index)
    transport, region = _open_transport(cfg, args.index)
    engine = ComputeEngine(meta, transport, cache_clusters=0, ef_meta=cfg.ef_meta)
    vectors = load_fvecs(args.vectors)
    for offset, v in enumerate(vectors):
        vid = args.start_id + offset
        part = engine.insert_vector(VectorRecord(vid, v))
        print(f"{vid}\t{part}")
    if region is not None:
        with open(os.path.join(args.index, IMAGE_FILE), "wb") as fh:
            fh.write(serve_read(region, 0, region.capacity))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _config(args)
    report = run_experiment(cfg, spawn_server=not args.remote)
    os.makedirs(args.out, exist_ok=True)
    report.write_jsonl(os.path.join(args.out, "report.jsonl"))
    report.write_csv(os.path.join(args.out, "report.csv"))
    if args.dump_results:
        report.write_results(os.path.join(args.out, "results.jsonl"))
    print(f"{'mode':<11}{'ef':>4}{'recall':>9}{'rt/query':>12}{'lat us/q':>11}{'net':>10}{'sub':>10}{'meta':>9}")
    for r in report.rows:
        print(
            f"{r.mode:<11}{r.ef_search:>4}{r.recall:>9.4f}{r.round_trips_per_query:>12.5f}"
            f"{r.latency_mean_us:>11.1f}{r.network_us:>10.1f}{r.sub_hnsw_us:>10.1f}{r.meta_hnsw_us:>9.1f}"
        )
    return 0


def format_directory(d: ClusterDirectory) -> str:
    lines = [
        f"version      {d.version}",
        f"dim          {d.dim}",
        f"clusters     {d.num_clusters}",
        f"groups       {d.num_groups}",
        f"data start   {d.data_start}",
        f"region end   {d.end}",
        "",
        f"{'cluster':>7} {'group':>6} {'slot':>4} {'offset':>12} {'length':>10} {'ovf_off':>12} {'ovf_cap':>10} {'extent':>25}",
    ]
    for c, e in enumerate(d.entries):
        off, length = contiguous_read_extent(d, c)
        slot = "head" if e.slot == 0 else "tail"
        lines.append(
            f"{c:>7} {e.group_index:>6} {slot:>4} {e.cluster_offset:>12} {e.cluster_len:>10} "
            f"{e.overflow_offset:>12} {e.overflow_capacity:>10} {f'[{off}, {off + length})':>25}"
        )
    return "\n".join(lines)


def cmd_layout_dump(args: argparse.Namespace) -> int:
    if args.image:
        with open(args.image, "rb") as fh:
            head = fh.read(24)
            n = read_directory_header(head)[3]
            fh.seek(0)
            data = fh.read(directory_size(n))
    else:
        cfg = _config(args)
        t = connect(cfg.transport())
        n = read_directory_header(t.read(0, 24))[3]
        data = t.read(0, align8(directory_size(n)))
        t.close()
    print(format_directory(ClusterDirectory.from_bytes(data)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dhnsw", description="Partitioned HNSW over a remote memory node.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    b = sub.add_parser("build", help="partition, serialize and lay out an index")
    common(b)
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--upload", action="store_true", help="also write the image to the tcp memory node")
    b.set_defaults(func=cmd_build)

    s = sub.add_parser("serve", help="run a standalone memory node")
    s.add_argument("--image", help="region image to serve")
    s.add_argument("--capacity", type=int, help="serve an empty region of this many bytes")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=7471)
    s.set_defaults(func=cmd_serve)

    q = sub.add_parser("query", help="run one query batch")
    common(q)
    q.add_argument("--index", required=True, help="directory written by 'build'")
    q.add_argument("--queries", help=".fvecs query file (default: synthetic queries)")
    q.add_argument("--mode", choices=("full", "nodoorbell", "naive"), default="full")
    q.add_argument("--backend", choices=("inproc", "tcp"))
    q.add_argument("--address")
    q.set_defaults(func=cmd_query)

    i = sub.add_parser("insert", help="insert vectors into overflow regions")
    common(i)
    i.add_argument("--index", required=True)
    i.add_argument("--vectors", required=True, help=".fvecs file of vectors to insert")
    i.add_argument("--start-id", type=int, required=True, help="id of the first inserted vector")
    i.add_argument("--backend", choices=("inproc", "tcp"))
    i.add_argument("--address")
    i.set_defaults(func=cmd_insert)

    be = sub.add_parser("bench", help="full mode x ef_search sweep")
    common(be)
    be.add_argument("--out", required=True, help="report directory")
    be.add_argument("--dump-results", action="store_true", help="also write per-query result ids")
    be.add_argument("--remote", action="store_true", help="tcp backend: upload to --address instead of spawning a node")
    be.add_argument("--backend", choices=("inproc", "tcp"))
    be.add_argument("--address")
    be.set_defaults(func=cmd_bench)

    lay = sub.add_parser("layout", help="inspect the remote-memory layout")
    lsub = lay.add_subparsers(dest="layout_command", required=True)
    dump = lsub.add_parser("dump", help="print the cluster directory")
    common(dump)
    dump.add_argument("--image", help="region image file (default: read from the tcp memory node)")
    dump.add_argument("--address")
    dump.set_defaults(func=cmd_layout_dump, backend="tcp")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"dhnsw: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError) as exc:
        print(f"dhnsw: dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except (TransportError, ConnectionError) as exc:
        print(f"dhnsw: connection error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except CapacityError as exc:
        print(f"dhnsw: capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except CodecError as exc:
        print(f"dhnsw: layout error: {exc}", file=sys.stderr)
        return EXIT_CODEC
    except DhnswError as exc:
        print(f"dhnsw: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
