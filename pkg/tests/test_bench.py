import json
import struct

import numpy as np
import pytest

from dhnsw.bench.datasets import (
    Dataset,
    ground_truth,
    load_fvecs,
    load_ivecs,
    recall_at_k,
    synthetic_dataset,
    write_vecs,
)
from dhnsw.bench.runner import CSV_FIELDS, run_experiment
from dhnsw.config import Config, dump_config, load_config, parse_config_text
from dhnsw.errors import ConfigError, DatasetError, DimensionMismatchError


def test_fvecs_one_record(tmp_path):
    p = tmp_path / "one.fvecs"
    p.write_bytes(struct.pack("<iff", 2, 1.0, 2.0))
    assert load_fvecs(p).tolist() == [[1.0, 2.0]]


def test_fvecs_empty(tmp_path):
    p = tmp_path / "empty.fvecs"
    p.write_bytes(b"")
    assert len(load_fvecs(p)) == 0


def test_fvecs_truncated_names_offset(tmp_path):
    p = tmp_path / "cut.fvecs"
    p.write_bytes(struct.pack("<iff", 2, 1.0, 2.0) + struct.pack("<if", 2, 3.0))
    with pytest.raises(DatasetError, match="byte offset 12"):
        load_fvecs(p)


def test_fvecs_inconsistent_and_bad_dim(tmp_path):
    p = tmp_path / "mixed.fvecs"
    p.write_bytes(struct.pack("<iff", 2, 1.0, 2.0) + struct.pack("<if", 1, 3.0))
    with pytest.raises(DatasetError, match="byte offset 12"):
        load_fvecs(p)
    q = tmp_path / "zero.fvecs"
    q.write_bytes(struct.pack("<i", 0))
    with pytest.raises(DatasetError):
        load_fvecs(q)


def test_vecs_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    f = rng.normal(size=(7, 5)).astype(np.float32)
    i = rng.integers(0, 1000, size=(7, 3)).astype(np.int32)
    write_vecs(tmp_path / "a.fvecs", f)
    write_vecs(tmp_path / "a.ivecs", i)
    assert np.array_equal(load_fvecs(tmp_path / "a.fvecs"), f)
    assert np.array_equal(load_ivecs(tmp_path / "a.ivecs"), i)
    raw = (tmp_path / "a.fvecs").read_bytes()
    assert struct.unpack_from("<i", raw, 24)[0] == 5 and len(raw) == 7 * 24


def test_ground_truth_examples():
    base = np.random.default_rng(1).normal(size=(20, 3)).astype(np.float32)
    assert ground_truth(base, base[7:8], 1).tolist() == [[7]]
    order = np.argsort(((base - base[3]) ** 2).sum(1), kind="stable")
    assert ground_truth(base, base[3:4], 20)[0].tolist() == order.tolist()
    tie = np.array([[1, 0], [-1, 0]], dtype=np.float32)
    assert ground_truth(tie, np.zeros((1, 2)), 2).tolist() == [[0, 1]]
    with pytest.raises(DimensionMismatchError):
        ground_truth(base, np.zeros((1, 2)), 1)


def test_recall_examples():
    assert recall_at_k(list(range(10)), list(range(10)), 10) == 1.0
    assert recall_at_k(list(range(10)), list(range(10, 20)), 10) == 0.0
    assert recall_at_k(list(range(10)), list(range(5, 15)), 10) == 0.5
    assert recall_at_k([[1, 2], [3, 4]], [[1, 2], [3, 9]], 2) == 0.75
    with pytest.raises(DatasetError):
        recall_at_k([1, 2], [1], 2)


def test_synthetic_deterministic():
    a = synthetic_dataset(500, 20, 8, blobs=4, seed=3, k=5)
    b = synthetic_dataset(500, 20, 8, blobs=4, seed=3, k=5)
    assert np.array_equal(a.base, b.base) and np.array_equal(a.ground_truth, b.ground_truth)
    assert a.truth(5).shape == (20, 5)
    with pytest.raises(DatasetError):
        a.truth(6)
    with pytest.raises(DimensionMismatchError):
        Dataset(np.zeros((3, 2)), np.zeros((1, 3)))


def test_config_text(tmp_path, monkeypatch):
    text = "# comment\nb = 4\nmodes = full, naive\nef_sweep = 1,48\ncache_fraction = none\nbackend=tcp # inline\n"
    assert parse_config_text(text)["backend"] == "tcp"
    p = tmp_path / "c.txt"
    p.write_text(text)
    monkeypatch.delenv("DHNSW_ADDRESS", raising=False)
    cfg = load_config(str(p), {"k": "5"})
    assert (cfg.b, cfg.k, cfg.modes, cfg.ef_sweep, cfg.cache_fraction) == (4, 5, ("full", "naive"), (1, 48), None)
    monkeypatch.setenv("DHNSW_ADDRESS", "10.0.0.1:9")
    assert load_config(str(p)).address == "10.0.0.1:9"
    assert load_config(None, parse_config_text(dump_config(cfg))).b == 4
    with pytest.raises(ConfigError):
        load_config(None, {"nonsense": 1})
    with pytest.raises(ConfigError):
        load_config(None, {"b": "two"})
    with pytest.raises(ConfigError):
        parse_config_text("just words")


SMALL = dict(n=3000, nq=200, dim=16, blobs=16, partitions=16, ef_construction=64, M=12, batch_size=100, seed=2)


@pytest.fixture(scope="module")
def report():
    return run_experiment(Config(**SMALL))


def test_report_rows(report, tmp_path):
    assert [(r.mode, r.ef_search) for r in report.rows] == [
        (m, e) for m in ("naive", "nodoorbell", "full") for e in (1, 8, 48)
    ]
    for r in report.rows:
        assert 0.0 <= r.recall <= 1.0
        assert r.sub_hnsw_us + r.meta_hnsw_us <= r.latency_mean_us
    for mode in ("naive", "nodoorbell", "full"):
        recalls = [report.row(mode, e).recall for e in (1, 8, 48)]
        assert recalls == sorted(recalls)
    assert report.row("naive", 48).round_trips == 200 * 2
    report.write_jsonl(tmp_path / "r.jsonl")
    report.write_csv(tmp_path / "r.csv")
    recs = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(recs) == 9 and recs[0]["mode"] == "naive"
    header = (tmp_path / "r.csv").read_text().splitlines()[0].split(",")
    assert header == CSV_FIELDS


def test_report_recall_rederivable(report, tmp_path):
    data = synthetic_dataset(3000, 200, 16, blobs=16, seed=2, k=10)
    report.write_results(tmp_path / "res.jsonl")
    for line in (tmp_path / "res.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert recall_at_k(rec["ids"], data.truth(10), 10) == report.row(rec["mode"], rec["ef_search"]).recall


def test_modes_agree(report):
    for e in (1, 8, 48):
        base = [set(r) for r in report.row("naive", e).results]
        for mode in ("nodoorbell", "full"):
            assert [set(r) for r in report.row(mode, e).results] == base


def test_tcp_workers_match_inproc(report):
    cfg = Config(**SMALL, backend="tcp", workers=2, modes=("full",), ef_sweep=(48,))
    tcp = run_experiment(cfg)
    assert tcp.row("full", 48).results == report.row("full", 48).results


def test_file_dataset(tmp_path):
    data = synthetic_dataset(400, 10, 8, blobs=4, seed=5, k=5)
    write_vecs(tmp_path / "b.fvecs", data.base)
    write_vecs(tmp_path / "q.fvecs", data.queries)
    cfg = Config(dataset="files", base=str(tmp_path / "b.fvecs"), query=str(tmp_path / "q.fvecs"),
                 k=5, partitions=4, ef_construction=32, modes=("full",), ef_sweep=(48,))
    rep = run_experiment(cfg)
    assert rep.row("full", 48).queries == 10
    with pytest.raises(DatasetError):
        run_experiment(Config(dataset="files"))
